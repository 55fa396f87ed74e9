"""Text-to-speech with ultrasound tongue articulation targets.

Modules:

* :mod:`ultratts.codec`      bicubic resizing, PCA codec, wedge rendering
* :mod:`ultratts.features`   stream layouts, deltas, resampling, normalisation
* :mod:`ultratts.frontend`   text -> phones -> linguistic vectors
* :mod:`ultratts.nn`         MLP / LSTM regressors and training
* :mod:`ultratts.generation` static trajectory generation (MLPG)
* :mod:`ultratts.metrics`    corpus split, MCD, ULT-PCA RMSE
* :mod:`ultratts.corpus`     corpus files and the synthetic corpus generator
* :mod:`ultratts.pipeline`   prepare / train / synthesize / evaluate stages
"""

__version__ = "0.1.0"
