"""Person detection in 2D range scans with spatial-attention temporal fusion."""

from .cutout import CutoutParams, build_cutouts
from .detector import BackboneSpec, Detector, DetectorStream, SpaamParams, Variant
from .evalmetrics import EvalResult, evaluate
from .scan_data import Annotation, LidarConfig, Scan, ScanSequence, load_sequence, save_sequence
from .vote import Detection, VoteParams, detect

__version__ = "0.1.0"
