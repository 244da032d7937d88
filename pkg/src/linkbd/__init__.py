"""Link-prediction backdoor laboratory.

Core package: graph substrate, tape autodiff, GCN-autoencoder link
predictors, the node-injection trigger attack with gradient-sign
optimization, baseline attacks, a feature-noise defense and the full
evaluation stack. A FastAPI service and a thin CLI client sit on top.
"""

__version__ = "0.1.0"
