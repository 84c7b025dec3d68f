"""Few-shot OOD detection workbench.

Prototype banks tuned on frozen embeddings with a belief-weighted pull
toward a frozen general-knowledge bank, plus divergence diagnostics that
track every computable term of the generalization-bound decomposition.

Submodules are imported explicitly (``from good import embedkit``); this
package root stays import-light so the CLI can pin BLAS thread counts
before numpy loads.
"""

__version__ = "0.1.0"
