"""Gaming video quality prediction: VMAF-labelled patches, fine-tuned CNN backbones, study harness."""

__version__ = "0.1.0"
