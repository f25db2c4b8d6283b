class ToolError(Exception):
    """A tool failed in a way the policy can see and recover from."""


class InvalidBBox(ToolError, ValueError):
    pass


class IndexOutOfRange(ToolError, IndexError):
    pass


class InfrastructureError(Exception):
    """Failure outside the policy's control; aborts the rollout rather than scoring it."""


class BackendUnavailable(InfrastructureError):
    pass


class CacheMiss(InfrastructureError, KeyError):
    def __init__(self, key: str, detail: str = ""):
        super().__init__(key)
        self.key = key
        self.detail = detail

    def __str__(self):
        return f"cache miss {self.key}" + (f" ({self.detail})" if self.detail else "")
