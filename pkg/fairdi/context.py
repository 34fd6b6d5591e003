from contextvars import ContextVar

# Name of the training stage currently running in this thread of control
stage: ContextVar[str] = ContextVar("stage", default="-")
