"""Tests for the main.py launcher and logging setup."""

import logging
from pathlib import Path
from unittest.mock import patch

import pytest

from chaoscope.cli import setup_logging
from chaoscope.config import Settings
from main import main


class TestMain:
    """Tests for the root launcher."""

    def test_exits_with_cli_code(self) -> None:
        """Test that the launcher exits with the code returned by the CLI."""
        with patch("main.cli_main", return_value=2) as mock_cli, pytest.raises(SystemExit) as exc_info:
            main()

        mock_cli.assert_called_once_with()
        assert exc_info.value.code == 2


class TestSetupLogging:
    """Tests for setup_logging."""

    def test_configures_handlers_and_level(self, tmp_path: Path) -> None:
        """Test that a log file handler is added and the level follows the settings."""
        settings = Settings(log_level="warning", log_file=tmp_path / "logs" / "run.log")

        with patch("chaoscope.cli.logging.basicConfig") as mock_basic:
            setup_logging(settings)

        kwargs = mock_basic.call_args.kwargs
        assert kwargs["level"] == "WARNING"
        assert any(isinstance(h, logging.FileHandler) for h in kwargs["handlers"])
        assert (tmp_path / "logs").is_dir()
        for handler in kwargs["handlers"]:
            handler.close()

    def test_verbose_selects_debug(self) -> None:
        """Test that --verbose forces DEBUG regardless of the settings."""
        with patch("chaoscope.cli.logging.basicConfig") as mock_basic:
            setup_logging(Settings(log_level="ERROR"), verbose=True)

        assert mock_basic.call_args.kwargs["level"] == logging.DEBUG
        assert logging.getLogger("matplotlib").level == logging.WARNING
