"""Continual-learning rank-collapse laboratory (Python bindings)."""

from ._core import (  # noqa: F401
    ConfigError,
    DimensionError,
    Error,
    FetchError,
    InputError,
    IntegrityError,
    IoError,
    Model,
    NumericError,
    ParameterError,
    ParseError,
    ReplayBuffer,
    UsageError,
    __version__,
    activation_erank,
    config_defaults,
    effective_rank,
    element_type,
    emit_plots,
    import_metrics,
    load_config_grid,
    lwf_loss,
    parse_cifar100,
    parse_idx,
    peak_normalize,
    resolve_config,
    run_experiment,
    serialize_idx,
    singular_values,
)
