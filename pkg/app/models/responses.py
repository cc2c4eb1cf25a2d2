"""
Pydantic result models printed or written by the command line.
"""
from typing import List, Optional

from pydantic import BaseModel


def format_float(value: Optional[float]) -> str:
    """Shortest round-trip decimal of a float; empty for None."""
    return "" if value is None else repr(float(value))


class PriceReport(BaseModel):
    """Result of a pricing run.

    Attributes:
        method: Tree method
        price: Y0
        build_seconds: Tree build time
        solve_seconds: Backward solve time
        tree_sizes: Grid sizes N_1..N_n
    """
    method: str
    price: float
    build_seconds: float
    solve_seconds: float
    tree_sizes: List[int]

    def to_lines(self) -> List[str]:
        """The ``key=value`` block printed on standard output."""
        return [
            f"method={self.method}",
            f"price={format(self.price, '.17g')}",
            f"build_seconds={self.build_seconds:.6f}",
            f"solve_seconds={self.solve_seconds:.6f}",
            f"tree_sizes={','.join(str(s) for s in self.tree_sizes)}",
        ]


class ExperimentRow(BaseModel):
    """One cell of a reproduced table.

    Attributes:
        table: Table id (t1, t2, t3)
        method: Method label
        param: Cell parameter, e.g. K=100
        computed: Computed price
        reference: Published reference price
        abs_error: |computed - reference|
        build_s: Tree build seconds, None when timings are off
        solve_s: Solve seconds, None when timings are off
        provenance: Source tag of the reference value
    """
    table: str
    method: str
    param: str
    computed: float
    reference: float
    abs_error: float
    build_s: Optional[float] = None
    solve_s: Optional[float] = None
    provenance: str

    def to_record(self) -> List[str]:
        return [self.table, self.method, self.param, format_float(self.computed),
                format_float(self.reference), format_float(self.abs_error),
                format_float(self.build_s), format_float(self.solve_s), self.provenance]
