"""Co-evolution harness for dual-agent (recommender + simulated user)
recommendation with coupled interaction rewards and self-distilled
token-level credit assignment."""

__version__ = "0.1.0"
