class FigvizError(Exception):
    """Base for renderer failures; exit_code feeds the CLI."""

    exit_code = 1


class ReportError(FigvizError):
    """The report is unreadable or its schema version is unsupported."""

    exit_code = 2


class LayoutError(FigvizError):
    """The hex layout file is malformed."""

    exit_code = 3
