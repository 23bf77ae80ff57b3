"""OpenTelemetry instrumentation using Logfire SDK with local backend."""

import logging
from collections.abc import Iterator
from contextlib import contextmanager, nullcontext
from typing import Any

import logfire

from chaoscope.config import Settings

logger = logging.getLogger(__name__)

_configured = False


def configure_instrumentation(settings: Settings) -> None:
    """Configure Logfire tracing with a local OTel backend.

    This uses the Logfire SDK but sends data to a local OpenTelemetry collector
    instead of the Logfire cloud service. The OTEL_EXPORTER_OTLP_ENDPOINT
    environment variable (set from settings.otel_exporter_endpoint by `chaoscope.cli.main`)
    controls where traces are sent.

    Args:
        settings: Application settings containing instrumentation configuration.
    """
    global _configured  # noqa: PLW0603

    if not settings.otel_enabled:
        logger.debug("OpenTelemetry instrumentation disabled")
        return

    # Configure Logfire to NOT send to Logfire cloud
    logfire.configure(
        send_to_logfire=False,
        service_name="chaoscope",
    )
    _configured = True

    logger.info(
        "OpenTelemetry instrumentation enabled, exporting to %s",
        settings.otel_exporter_endpoint,
    )


@contextmanager
def span(name: str, **attributes: Any) -> Iterator[None]:
    """Open a logfire span when instrumentation is configured, else do nothing."""
    ctx = logfire.span(name, **attributes) if _configured else nullcontext()
    with ctx:
        yield
