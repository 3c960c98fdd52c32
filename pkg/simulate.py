"""Run V2G scheduling simulations."""
from pytorch_v2g import cli

if __name__ == "__main__":
    cli()
