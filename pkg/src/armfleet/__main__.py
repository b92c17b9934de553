"""Allow ``python -m armfleet``; worker processes are launched this way."""

from armfleet.cli import app

if __name__ == "__main__":
    app()
