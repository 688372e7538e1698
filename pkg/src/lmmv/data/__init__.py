from .catalog import (MISSING_CODE, MISSING_CONTINUOUS, MISSING_LABEL, Column, Dataset,
                      PatientSeries, SchemaError, ViewCatalog, ViewSpec, encode_missing_tabular)
from .io import (BlobError, ChecksumError, DanglingReferenceError, DatasetFormatError,
                 SchemaVersionError, decode_blob, encode_blob, load_dataset, save_dataset)
from .preprocess import percentile_normalize
from .synth import SynthConfig, ViewSynth, default_views, generate, missingness_summary

__all__ = [
    "MISSING_CODE", "MISSING_CONTINUOUS", "MISSING_LABEL", "Column", "Dataset", "PatientSeries",
    "SchemaError", "ViewCatalog", "ViewSpec", "encode_missing_tabular", "BlobError",
    "ChecksumError", "DanglingReferenceError", "DatasetFormatError", "SchemaVersionError",
    "decode_blob", "encode_blob", "load_dataset", "save_dataset", "percentile_normalize",
    "SynthConfig", "ViewSynth", "default_views", "generate", "missingness_summary",
]
