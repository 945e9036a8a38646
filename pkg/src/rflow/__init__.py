"""rflow: generative velocity fields on constrained domains.

Library layout:

- ``geometry``: domains with containment, ray-boundary hits and reflection
- ``flows``: in-domain conditional flows, priors, and data distributions
- ``net``: residual MLP velocity model with explicit parameters and exact
  reverse-mode gradients
- ``train``: matching objective, Adam, and the training loop
- ``sample``: one-step ODE solvers and the iterative-reflection sampler
- ``metrics``: k-NN KL divergence, violation ratio, histogram/quiver grids
- ``config`` / ``recipes`` / ``cli``: experiment configuration, built-in
  toy recipes, and the command line
"""

__version__ = "0.1.0"
