from ._kvcompress import (
    ConfigError,
    ContractError,
    DataError,
    InfeasibleBudgetError,
    InvalidMaskError,
    KvcError,
    Method,
    Model,
    ModelConfig,
    NumericError,
    PosScheme,
    SchemaError,
    TokenIndexError,
    Tokenizer,
    TrainScope,
    UnsupportedMethodError,
    cache_size_bytes,
    compression_mask,
    generate,
    local_mask,
    nucleus_support,
    perplexity,
    rouge_l,
    sample_spans,
    scattered_mask,
    train,
    transform,
)

__all__ = [name for name in dir() if not name.startswith("_")]
