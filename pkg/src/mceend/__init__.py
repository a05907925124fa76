"""Multi-channel end-to-end neural diarization for distributed microphones."""

__version__ = "0.1.0"
