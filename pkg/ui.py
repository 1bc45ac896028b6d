"""
Shared UI module for EndoNav
Provides a centralized Rich console, logging setup and common UI helpers.
"""

import logging
from typing import Dict, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeRemainingColumn,
)
from rich.table import Column, Table
from rich.theme import Theme

# Custom theme with semantic color names
EN_THEME = Theme({
    "success": "green",
    "error": "red",
    "warning": "yellow",
    "info": "cyan",
    "highlight": "magenta",
    "task": "bold white",
    "metric": "bold cyan",
    "dim": "dim",
})

# Global console instance -- all modules import this
console = Console(theme=EN_THEME, highlight=False)


def setup_logging(verbose: bool = False):
    """Route stdlib logging through the shared console."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=verbose, rich_tracebacks=True)],
        force=True,
    )


def section_header(title: str, subtitle: str = None):
    """Display a section header as a Rich Panel."""
    content = title
    if subtitle:
        content += f"\n[dim]{subtitle}[/dim]"
    console.print()
    console.print(Panel(content, style="bold cyan", expand=True))
    console.print()


def success(message: str):
    """Print a success message with green checkmark."""
    console.print(f"[success]✓[/success] {message}")


def error(message: str):
    """Print an error message with red X."""
    console.print(f"[error]✗[/error] {message}")


def warning(message: str):
    """Print a warning message."""
    console.print(f"[warning]⚠[/warning] {message}")


def info(message: str):
    """Print an info message."""
    console.print(f"[info]ℹ[/info] {message}")


def create_step_progress() -> Progress:
    """
    Progress bar for collection, training and evaluation loops.
    transient=True so the bar disappears after completion; the `stats`
    field carries a short live summary (return, success, losses).
    """
    return Progress(
        SpinnerColumn(),
        TextColumn(
            "[progress.description]{task.description}",
            table_column=Column(ratio=1, no_wrap=True, overflow="ellipsis"),
        ),
        BarColumn(bar_width=24),
        MofNCompleteColumn(),
        TextColumn("{task.fields[stats]}", table_column=Column(width=28)),
        TimeRemainingColumn(),
        console=console,
        transient=True,
    )


def format_stats(values: Dict[str, float]) -> str:
    """Compact 'k=v' summary for progress rows."""
    return " ".join(f"{k}={v:.3g}" for k, v in values.items())


def format_seconds(seconds: float) -> str:
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, secs = divmod(int(seconds), 60)
    if minutes < 60:
        return f"{minutes}m {secs:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes:02d}m"


def create_stage_table(stages: Dict[str, Dict], title: str = "Pipeline Stages") -> Table:
    """
    Table of pipeline stages from a run manifest.

    Args:
        stages: {stage name: {'status': str, 'seconds': float, 'artifacts': [...]}}
    """
    table = Table(title=title, show_header=True, header_style="bold cyan")
    table.add_column("Stage", style="task", no_wrap=True)
    table.add_column("Status")
    table.add_column("Wall clock", justify="right")
    table.add_column("Artifacts", justify="right")
    styles = {'done': 'success', 'failed': 'error', 'interrupted': 'warning', 'running': 'info'}
    for name, stage in stages.items():
        status = stage.get('status', '--')
        style = styles.get(status, 'dim')
        seconds: Optional[float] = stage.get('seconds')
        table.add_row(
            name,
            f"[{style}]{status}[/{style}]",
            format_seconds(seconds) if seconds is not None else "--",
            str(len(stage.get('artifacts', []))),
        )
    return table
