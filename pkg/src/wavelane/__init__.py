"""Lane-marking segmentation with wavelet sub-band injection, built on a small numpy autodiff engine."""
from .metrics import MetricReport, confusion, report
from .network import EncoderConfig, InjectionConfig, NetworkConfig, build, forward
from .synthgen import SceneSpec, generate
from .tensor import ShapeError, Tensor, backward
from .training import Adam, LossParams, TrainConfig, train, weighted_cross_entropy
from .wavelet import daubechies_filters, dwt_pyramid, haar_filters

__version__ = "0.1.0"
