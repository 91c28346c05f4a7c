"""Teacher-representation extractor: consumes eegfuse adapted-input exports,
runs a frozen backbone, and writes .mtdpcache files the trainer loads."""

__version__ = "0.1.0"
