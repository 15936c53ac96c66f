# ui.py
import math

import pandas as pd
from rich.console import Console
from rich.rule import Rule
from rich.table import Table

console = Console()


def render_header(title: str):
    console.print(f"[bold]{title}[/bold]")
    console.print(Rule())


def _fmt(value) -> str:
    if isinstance(value, float):
        return "-" if math.isnan(value) else f"{value:.4f}"
    if value is None or value is pd.NA:
        return "-"
    return str(value)


def render_table(df: pd.DataFrame, title: str = ""):
    """Muestra un DataFrame como tabla en consola (floats con 4 decimales)."""
    table = Table(title=title or None, show_lines=False)
    for col in df.columns:
        table.add_column(str(col), justify="right" if pd.api.types.is_numeric_dtype(df[col]) else "left")
    for row in df.itertuples(index=False):
        table.add_row(*[_fmt(v) for v in row])
    console.print(table)


def render_kv(pairs: dict, title: str = ""):
    table = Table(title=title or None, show_header=False)
    table.add_column("clave", style="cyan")
    table.add_column("valor")
    for key, value in pairs.items():
        table.add_row(str(key), _fmt(value))
    console.print(table)
