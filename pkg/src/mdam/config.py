"""JSON configuration: data schema plus model specification, and margins.

A spec file looks like::

    {"schema": {"variables": [{"name": "S", "levels": ["Male", "Female"], "role": "X"}, ...],
                "weight_column": "weight", "unit_nr_column": null},
     "model": {"outcomes": [...], "item_models": [...], ...}}

A margins file lists one entry per margin-backed variable, with either
population ``totals`` or ``proportions`` (scaled by the population size) of
the non-baseline levels, and optional ``variances``.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .dataset import CsvSchema, SchemaError, VariableDef
from .margins import AuxMargin, MarginError
from .sampler import ModelSpec, SpecError


class ConfigError(ValueError):
    pass


def _read(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} is not valid JSON: {err}") from None


def schema_from_dict(d: dict) -> CsvSchema:
    try:
        variables = tuple(
            VariableDef(v["name"], tuple(v["levels"]), v.get("role", "Y"), int(v.get("update_rank", 0)))
            for v in d["variables"]
        )
        return CsvSchema(
            variables,
            columns=dict(d.get("columns", {})),
            weight_column=d.get("weight_column", "weight"),
            unit_nr_column=d.get("unit_nr_column"),
            missing_codes=frozenset(d.get("missing_codes", ["", "NA"])),
            delimiter=d.get("delimiter", ","),
            weight_kind=d.get("weight_kind", "design"),
        )
    except (KeyError, TypeError) as err:
        raise SchemaError(f"malformed schema: {err!r}") from None


def schema_to_dict(schema: CsvSchema) -> dict:
    return {
        "variables": [{"name": v.name, "levels": list(v.levels), "role": v.role}
                      for v in schema.variables],
        "columns": dict(schema.columns),
        "weight_column": schema.weight_column,
        "unit_nr_column": schema.unit_nr_column,
        "missing_codes": sorted(schema.missing_codes),
        "delimiter": schema.delimiter,
        "weight_kind": schema.weight_kind,
    }


def load_spec(path) -> tuple[CsvSchema, ModelSpec]:
    d = _read(path)
    if "schema" not in d or "model" not in d:
        raise ConfigError(f"{path} needs 'schema' and 'model' sections")
    return schema_from_dict(d["schema"]), ModelSpec.from_dict(d["model"])


def margins_from_dict(d: dict, N: float | None) -> dict:
    out = {}
    for entry in d.get("margins", []):
        try:
            name = entry["variable"]
            var = entry.get("variances")
            src = entry.get("source", "")
            if "totals" in entry:
                m = AuxMargin(name, entry["totals"], var, source=src)
            elif "proportions" in entry:
                if N is None:
                    raise ConfigError(f"margin for {name!r} is given as proportions; "
                                      "the population size is required")
                m = AuxMargin.from_proportions(name, entry["proportions"], N, var, source=src)
            else:
                raise ConfigError(f"margin for {name!r} needs 'totals' or 'proportions'")
        except KeyError as err:
            raise MarginError(f"malformed margin entry: missing {err}") from None
        if name in out:
            raise MarginError(f"two margins for {name!r}")
        out[name] = m
    return out


def load_margins(path, N: float | None) -> dict:
    return margins_from_dict(_read(path), N)


def load_json(path) -> dict:
    return _read(path)


def example_path(name: str) -> Path:
    """Path of a bundled example config (``cps_spec.json``, ``cps_margins.json``)."""
    return Path(str(resources.files("mdam") / "configs" / name))


__all__ = ["ConfigError", "SchemaError", "SpecError", "MarginError", "load_spec", "load_margins",
           "margins_from_dict", "schema_from_dict", "schema_to_dict", "load_json", "example_path"]
