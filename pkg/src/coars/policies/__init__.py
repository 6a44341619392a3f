"""Policy backends: scripted (tests), toy trainable (RL checks), remote (LLMs)."""

from .base import Context, PolicyBackend, Role, rec_context_for, user_context_for
from .remote import PROTOCOL, RemotePolicy
from .scripted import ScriptedRecPolicy, ScriptedUserPolicy
from .toy import ToyPolicy, Vocabulary, bucket_midpoint, decode_message

__all__ = [
    "Context",
    "PolicyBackend",
    "Role",
    "rec_context_for",
    "user_context_for",
    "PROTOCOL",
    "RemotePolicy",
    "ScriptedRecPolicy",
    "ScriptedUserPolicy",
    "ToyPolicy",
    "Vocabulary",
    "bucket_midpoint",
    "decode_message",
]
