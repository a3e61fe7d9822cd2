"""Single-server private information retrieval over BFV/RGSW.

Layering: params -> modring (RNS/NTT/gadget) -> lattice (BFV, RGSW, Subs)
-> pir (the retrieval pipeline) -> fileio / sched / service / cli.
"""

from .params import ParameterError, PirParams, profile_params, table1_params, test_params
from .modring import BigCoeffPoly, Domain, RnsPoly
from .lattice import (BfvCiphertext, EvalKey, NoiseBudget, RgswCiphertext,
                      SecretKey, decrypt_bfv, encrypt_bfv, encrypt_rgsw,
                      external_product, keygen, noise_budget, substitute)
from .pir import (DatabaseImage, PirQuery, PirResponse, answer_query,
                  build_query, col_tor, decode_response, expand_query,
                  preprocess_db, row_sel)

__all__ = [
    "ParameterError", "PirParams", "profile_params", "table1_params",
    "test_params", "BigCoeffPoly", "Domain", "RnsPoly", "BfvCiphertext",
    "EvalKey", "NoiseBudget", "RgswCiphertext", "SecretKey", "decrypt_bfv",
    "encrypt_bfv", "encrypt_rgsw", "external_product", "keygen",
    "noise_budget", "substitute", "DatabaseImage", "PirQuery", "PirResponse",
    "answer_query", "build_query", "col_tor", "decode_response",
    "expand_query", "preprocess_db", "row_sel",
]
