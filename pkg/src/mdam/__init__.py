"""Multiple imputation for unit and item nonresponse in weighted categorical
surveys, with auxiliary population margins identifying the unit-nonresponse
mechanism."""

from .dataset import CsvSchema, SurveyDataset, VariableDef, load_csv, write_csv
from .estimate import ht_total, pool, rubin_combine, survey_logit, weighted_proportion
from .margins import AuxMargin
from .sampler import (
    ItemModel,
    MeasurementErrorSpec,
    ModelSpec,
    MultipleImputations,
    OutcomeModel,
    SamplerControls,
    StructuralRule,
    run,
    run_icin,
)
from .weights import weights_from_adjusted, weights_from_design

__version__ = "0.1.0"

__all__ = [
    "AuxMargin", "CsvSchema", "ItemModel", "MeasurementErrorSpec", "ModelSpec",
    "MultipleImputations", "OutcomeModel", "SamplerControls", "StructuralRule", "SurveyDataset",
    "VariableDef", "ht_total", "load_csv", "pool", "rubin_combine", "run", "run_icin",
    "survey_logit", "weighted_proportion", "weights_from_adjusted", "weights_from_design",
    "write_csv",
]
