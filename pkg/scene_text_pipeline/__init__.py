"""Scene text transcription toolkit: synthetic rendering, CNN-BLSTM-CTC training, evaluation."""

__version__ = "1.0.0"
