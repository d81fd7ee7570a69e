"""Merit-function warm starts for trajectory optimization.

Library layout:

* ``autodiff``   reverse-mode tape over dense numpy arrays
* ``nlp``        parametric NLP container and KKT/merit helpers
* ``problems``   rover and powered-descent optimal control problems
* ``qp``/``sqp`` operator-splitting QP solver and the SQP driver
* ``policy``     warm-start policy networks and feature scaling
* ``losses``     supervised and merit-function training losses
* ``pipeline``   dataset generation, training loop, checkpoints
* ``evaluate``   feasibility metrics, timing benchmark, sensitivity
* ``figures``    matplotlib renderings of the report CSVs
* ``cli``        command-line entry point
"""

__version__ = "0.1.0"
