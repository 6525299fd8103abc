"""Desk-scale end-to-end speech recognition.

Spectrogram features feed a clipped-ReLU bidirectional RNN trained with
CTC and Nesterov momentum; transcriptions come from a prefix beam search
fused with a backoff n-gram word model.
"""

from dspeech.alphabet import ALPHABET, Alphabet, normalize_text

__version__ = "0.1.0"

__all__ = ["ALPHABET", "Alphabet", "normalize_text", "__version__"]
