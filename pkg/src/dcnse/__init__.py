"""Dense convolutional network with self-attention for time-domain speech
enhancement, on a small numpy autodiff engine."""
from .tensor import Tensor, backward, no_grad
from .signal import FrameMatrix, StftConfig, frame_signal, overlap_add, stft
from .model import DcnConfig, DcnModel, build_dcn, forward, enhance_utterance, attention_maps
from .losses import LossConfig, loss_time, loss_sm, loss_tf, loss_pcm, artifact_probe
from .data import mix_at_snr, synth_dataset, snr_metric, si_sdr, wav_read, wav_write

__version__ = "0.1.0"
