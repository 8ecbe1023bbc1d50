"""Attentive neural process for sparse spatiotemporal biomass interpolation.

Modules: ``diffcore`` (reverse-mode autodiff), ``anp`` (the model),
``training`` (episodic meta-training), ``synthworld`` (synthetic world and
dataset IO), ``baselines`` (quantile forest and boosting), ``evalcal``
(evaluation protocol) and ``cli``.
"""

__version__ = "0.1.0"
