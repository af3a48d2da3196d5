"""
ldnkit top-level package.

Several important classes and functions are re-exported here, so you can more easily import them.
For example, you can use :python:`from ldnkit import ArchSpec` instead of
:python:`from ldnkit.nets import ArchSpec`.

The following are re-exported:

- :class:`.Tensor` (from module :mod:`.ldnkit.tensor`)
- :class:`.CheckpointPolicy`, :func:`.traceForward`, :func:`.backward`, :func:`.measurePeak`
  (from module :mod:`.ldnkit.autograd`)
- :class:`.ArchSpec`, :func:`.buildLadderModel`, :func:`.initParameters` (from module
  :mod:`.ldnkit.nets`)
- :class:`.TrainConfig`, :class:`.Trainer` (from module :mod:`.ldnkit.trainer`)
"""


#: Package title.
#:
#: :meta hide-value:
__title__            = "ldnkit"

#: Package description.
#:
#: :meta hide-value:
__description__      = "ldnkit is a CPU implementation of ladder-style DenseNet semantic segmentation models, with memory-efficient gradient checkpointing, a static cost analyzer and a small training pipeline."

#: Package URL.
#:
#: :meta hide-value:
__url__              = "https://github.com/ldnkit/ldnkit"

#: Package author names.
#:
#: :meta hide-value:
__author__           = "The ldnkit developers"

#: Package author emails.
#:
#: :meta hide-value:
__author_email__     = ""

#: Package maintainer name.
#:
#: :meta hide-value:
__maintainer__       = "The ldnkit developers"

#: Package maintainer email.
#:
#: :meta hide-value:
__maintainer_email__ = ""

#: Package license.
#:
#: :meta hide-value:
__license__          = "MIT"

#: Package copyright.
#:
#: :meta hide-value:
__copyright__        = "Copyright 2026 The ldnkit developers"

#: Package version
#:
#: :meta hide-value:
__version__          = "0.1.0"


from .tensor import Tensor
from .autograd import CheckpointPolicy, traceForward, backward, measurePeak
from .nets import ArchSpec, buildLadderModel, initParameters
from .trainer import TrainConfig, Trainer
