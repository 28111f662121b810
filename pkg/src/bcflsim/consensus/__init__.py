from .base import ConsensusOutcome, RoundContext
from .flpbft import FLPBFTEngine
from .pofl import PoFLEngine
from .poq import PoQEngine

__all__ = ["ConsensusOutcome", "RoundContext", "FLPBFTEngine", "PoFLEngine", "PoQEngine"]
