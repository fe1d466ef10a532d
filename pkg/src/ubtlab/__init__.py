"""Toy-scale backdoor defense lab for image-text dual encoders.

Modules: ``numcore`` (autodiff), ``datagen`` (synthetic pairs and triggers),
``model`` (dual encoder), ``objectives`` (losses and SGD), ``defense``
(unlearning pipeline and baselines), ``evaluation`` (metrics and PAC
calculator), ``pipeline``/``config``/``cli`` (experiment runner).
"""

__version__ = "0.1.0"
