"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``DLCERT_BACKEND=python`` to force the fallback.
"""
import logging
import os

from dlcert import _kernels_py

logger = logging.getLogger(__name__)

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DLCERT_BACKEND", "").lower() != "python":
    try:
        from dlcert import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build
        logger.debug("compiled kernels unavailable, using numpy fallback")

chain_product = _impl.chain_product
chain_loss = _impl.chain_loss
chain_gradients = _impl.chain_gradients
als_restarts = _impl.als_restarts

__all__ = ["BACKEND", "chain_product", "chain_loss", "chain_gradients", "als_restarts"]
