"""Small report records returned by the certifiers and diagnostics."""
from dataclasses import dataclass, field

from . import jsonio


@dataclass
class CertReport:
    name: str
    fitted_C: float
    worst_point: tuple = ()
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "fitted_C": self.fitted_C,
                "worst_point": list(self.worst_point), **self.details}

    def __getitem__(self, key):
        return self.details[key]

    def to_json(self):
        return jsonio.dumps(self)


@dataclass
class ScalingReport:
    slope: float
    slope_expected: float
    fitted_C: float
    T_list: list = field(default_factory=list)
    values: list = field(default_factory=list)
    zero_field: bool = False

    def to_json(self):
        return jsonio.dumps(self)


@dataclass
class PropertyReport:
    name: str
    n_checked: int
    n_violations: int
    max_error: float = 0.0
    fitted_C: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.n_violations == 0

    def to_json(self):
        return jsonio.dumps(self)
