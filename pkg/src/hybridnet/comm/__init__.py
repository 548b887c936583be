from .base import Endpoint, reduce_in_order
from .message import (CommError, CommTimeout, GroupPurpose, Message, MessageKind,
                      PeerFailure, RankGroup, decode_frame, encode_frame)
from .sim import DEFAULT_BOUND, SimEndpoint, SimNetwork, run_ranks

__all__ = [
    "CommError", "CommTimeout", "DEFAULT_BOUND", "Endpoint", "GroupPurpose", "Message",
    "MessageKind", "PeerFailure", "RankGroup", "SimEndpoint", "SimNetwork",
    "decode_frame", "encode_frame", "reduce_in_order", "run_ranks",
]
