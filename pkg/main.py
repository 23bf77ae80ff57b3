"""Main entry point for chaoscope."""

import sys

from chaoscope.cli import main as cli_main


def main() -> None:
    """Run the application."""
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
