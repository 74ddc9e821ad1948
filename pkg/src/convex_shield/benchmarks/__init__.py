"""Benchmark generators: two synthetic regressions and the CAS-lite advisory tables."""

from .caslite import (
    ADVISORIES,
    CasLiteGrid,
    CasLiteParams,
    CasLiteTables,
    caslite_constraints,
    caslite_dataset,
    caslite_domain,
    caslite_solve,
    caslite_tables,
    caslite_unsafeable,
)
from .synthetic import gen_synthetic_1d, gen_synthetic_2d
from .suite import BENCHMARK_NAMES, MODEL_KINDS, SUITE, build_model, generate, get_benchmark, probe_set
