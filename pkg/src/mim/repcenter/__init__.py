"""Representation center: precomputed embedding table, new-item window and remote serving."""
from .flops import FlopDims, FlopLedger, FlopReport, flop_account, precompute_flops
from .protocol import ProtocolError, RemoteError
from .server import ParameterClient, ParameterServer, parse_bind, remote_lookup, remote_put, serve_parameters
from .store import DirectEncoder, EmbeddingStore, LookupResult, StoreMiss, lookup, precompute_table, quantize
from .window import SubmitAck, WindowBuffer, rim_flush, rim_submit

__all__ = [
    "DirectEncoder", "EmbeddingStore", "FlopDims", "FlopLedger", "FlopReport", "LookupResult", "ParameterClient",
    "ParameterServer", "ProtocolError", "RemoteError", "StoreMiss", "SubmitAck", "WindowBuffer", "flop_account",
    "lookup", "parse_bind", "precompute_flops", "precompute_table", "quantize", "remote_lookup", "remote_put",
    "rim_flush", "rim_submit", "serve_parameters",
]
