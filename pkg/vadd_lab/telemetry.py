# vadd_lab/telemetry.py

"""
Logging, Metrics and Tracing

- rich console logging, level from VADD_LAB_LOG_LEVEL
- Prometheus metrics in a private registry, dumped to <run>/metrics.prom
- OpenTelemetry spans per command; console export when VADD_LAB_TRACE=1
"""

import logging
import os
from contextlib import contextmanager
from pathlib import Path

from opentelemetry import trace
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor, ConsoleSpanExporter
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile
from rich.logging import RichHandler

# ======================================================
# Logging
# ======================================================

def setup_logging(level: str = None):
    level = (level or os.environ.get("VADD_LAB_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


# ======================================================
# Prometheus Metrics
# ======================================================

REGISTRY = CollectorRegistry()

TRAIN_STEPS = Counter(
    "vadd_train_steps_total",
    "Optimizer steps taken",
    registry=REGISTRY,
)

TRAIN_LOSS = Gauge(
    "vadd_train_loss",
    "Most recent minibatch loss (negated DELBO / ELBO)",
    registry=REGISTRY,
)

KL_WEIGHT = Gauge(
    "vadd_kl_weight",
    "Current KL annealing weight",
    registry=REGISTRY,
)

LEARNING_RATE = Gauge(
    "vadd_learning_rate",
    "Current learning rate",
    registry=REGISTRY,
)

STEP_LATENCY = Histogram(
    "vadd_step_latency_seconds",
    "Wall time of one optimizer step",
    registry=REGISTRY,
)

SAMPLES_GENERATED = Counter(
    "vadd_samples_generated_total",
    "Sequences produced by ancestral sampling",
    registry=REGISTRY,
)

ORACLE_CHECKS = Counter(
    "vadd_oracle_checks_total",
    "Oracle checks run",
    ["status"],
    registry=REGISTRY,
)


def write_metrics(run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "metrics.prom"
    write_to_textfile(str(path), REGISTRY)
    return path


# ======================================================
# OpenTelemetry Tracing
# ======================================================

_tracing_ready = False


def setup_tracing():
    global _tracing_ready
    if _tracing_ready:
        return
    if os.environ.get("VADD_LAB_TRACE") == "1":
        trace.set_tracer_provider(TracerProvider())
        trace.get_tracer_provider().add_span_processor(BatchSpanProcessor(ConsoleSpanExporter()))
    _tracing_ready = True


@contextmanager
def command_span(command: str, **attributes):
    setup_tracing()
    tracer = trace.get_tracer("vadd_lab")
    with tracer.start_as_current_span(f"vadd.{command}") as span:
        for key, value in attributes.items():
            span.set_attribute(key, value)
        yield span
