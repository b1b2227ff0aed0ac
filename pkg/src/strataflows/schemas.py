"""JSON schemas for command-line scenario and configuration files."""

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_span = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_int_pos = {"type": "integer", "minimum": 1}

_stratum = {
    "type": "object",
    "required": ["id"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "gender": {"enum": ["M", "F", "U"]},
        "age": {"type": ["integer", "string", "null"]},
        "location": {"type": ["string", "null"]},
    },
    "additionalProperties": False,
}

# scalar, per-stratum mapping, or per-stratum list
_xi_values = {
    "oneOf": [
        _prob,
        {"type": "object", "additionalProperties": _prob},
        {"type": "array", "items": _prob},
    ]
}

_sit_model = {
    "type": "object",
    "required": ["strata", "beta", "gamma", "mu", "S0", "I0"],
    "properties": {
        "strata": {"type": "array", "items": _stratum, "minItems": 1},
        "beta": {"type": "array", "items": {"type": "array", "items": {"type": "number", "minimum": 0}}},
        "gamma": {"type": "number", "minimum": 0},
        "mu": {"type": "number", "minimum": 0},
        "S0": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "I0": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "T0": {"type": "array", "items": {"type": "number", "minimum": 0}},
    },
    "additionalProperties": False,
}

_sit_common = {
    "model": {"oneOf": [{"const": "reference"}, _sit_model]},
    "N": _int_pos,
    "initial_prevalence": _prob,
    "normalization": {"enum": ["source", "recipient", "source_total", "total"]},
    "t_span": _span,
    "window": _span,
    "xi": _xi_values,
    "xi_recipient": _xi_values,
    "seed": {"type": "integer"},
    "replicates": _int_pos,
    "n_times": {"type": "integer", "minimum": 2},
}

SCENARIO = {
    "ode": {
        "type": "object",
        "required": ["model", "t_span"],
        "properties": {**_sit_common, "rtol": _pos, "atol": _pos},
        "additionalProperties": False,
    },
    "gillespie": {
        "type": "object",
        "required": ["model", "t_span"],
        "properties": {**_sit_common, "max_events": _int_pos},
        "additionalProperties": False,
    },
    "multinomial": {
        "type": "object",
        "required": ["strata", "pi0", "xi", "n_target"],
        "properties": {
            "strata": {"type": "array", "items": _stratum, "minItems": 1},
            "gender_semantics": {"type": "boolean"},
            "pi0": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["source", "recipient", "value"],
                    "properties": {
                        "source": {"type": "string"},
                        "recipient": {"type": "string"},
                        "value": {"type": "number", "minimum": 0},
                    },
                    "additionalProperties": False,
                },
            },
            "xi": _xi_values,
            "xi_recipient": _xi_values,
            "n_target": _pos,
            "mode": {"enum": ["pair", "individual"]},
            "seed": {"type": "integer"},
            "replicates": _int_pos,
        },
        "additionalProperties": False,
    },
    "gp": {
        "type": "object",
        "required": ["ages"],
        "properties": {
            "ages": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
            "locations": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "params": {
                "type": "object",
                "required": ["intercepts", "lengthscales", "sigma"],
                "properties": {
                    "intercepts": {"type": "object", "additionalProperties": {"type": "object", "additionalProperties": _num}},
                    "lengthscales": {"type": "object", "additionalProperties": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}},
                    "sigma": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                },
            },
            "xi": _xi_values,
            "xi_recipient": _xi_values,
            "seed": {"type": "integer"},
            "replicates": _int_pos,
        },
        "additionalProperties": False,
    },
}

_sampler = {
    "chains": _int_pos,
    "warmup": {"type": "integer", "minimum": 0},
    "iterations": _int_pos,
    "seed": {"type": "integer"},
}

ESTIMATE_SAMPLING = {
    "type": "object",
    "properties": {
        "method": {"enum": ["beta", "betabinomial"]},
        "draws": _int_pos,
        "alpha": _pos,
        "beta": _pos,
        "design": {"enum": ["intercept", "contrasts", "interactions"]},
        "gamma": {"oneOf": [{"const": "free"}, {"type": "number", "minimum": 0}]},
        "icar": {"type": "boolean"},
        "cv_folds": {"type": "integer", "minimum": 0},
        "n_steps": _int_pos,
        **_sampler,
    },
    "additionalProperties": False,
}

_xi_source = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["fixed", "beta", "draws"]},
        "source": {},
        "recipient": {},
    },
    "additionalProperties": False,
    "allOf": [
        {
            "if": {"properties": {"type": {"const": "fixed"}}},
            "then": {"required": ["source"], "properties": {"source": _xi_values, "recipient": _xi_values}},
        },
        {
            "if": {"properties": {"type": {"const": "beta"}}},
            "then": {
                "required": ["source"],
                "properties": {
                    "source": {"type": "object", "additionalProperties": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}},
                    "recipient": {"type": "object", "additionalProperties": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}},
                },
            },
        },
        {
            "if": {"properties": {"type": {"const": "draws"}}},
            "then": {"required": ["source"], "properties": {"source": {"type": "string"}, "recipient": {"type": "string"}}},
        },
    ],
}

FIT = {
    "type": "object",
    "properties": {
        "model": {"enum": ["gamma", "hsgp"]},
        "xi": _xi_source,
        "alpha": _pos,
        "beta": _pos,
        "prior": {"enum": ["hsgp", "exact"]},
        "basis": {
            "type": "object",
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "boundary_factor": {"type": "number", "exclusiveMinimum": 1},
                "scheme": {"enum": ["centered", "raw"]},
            },
            "additionalProperties": False,
        },
        "intercepts": {"enum": ["auto", "per_block", "mu_nu"]},
        "gp_blocks": {"enum": ["direction", "direction_location"]},
        "target_accept": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_steps": _int_pos,
        "rhat_threshold": _pos,
        **_sampler,
    },
    "additionalProperties": False,
}

SUMMARIZE = {
    "type": "object",
    "properties": {
        "functionals": {
            "type": "array",
            "items": {"enum": ["flows", "sources", "recipients", "ratio", "cv", "age_gap"]},
            "minItems": 1,
        },
        "name": {"type": "string"},
    },
    "additionalProperties": False,
}
