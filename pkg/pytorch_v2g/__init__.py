from pytorch_v2g.main import cli

__all__ = ["cli"]
