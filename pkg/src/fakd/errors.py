class FakdError(ValueError):
    """Error carrying a stable machine-readable ``code`` (e.g. ``"shape-mismatch"``)."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
