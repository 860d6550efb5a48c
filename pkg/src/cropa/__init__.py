"""Cross-prompt adversarial attacks against a seeded toy vision-language model."""

__version__ = "0.1.0"
