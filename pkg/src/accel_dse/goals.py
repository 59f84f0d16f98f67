"""Design goals. Every objective is minimized."""

from __future__ import annotations

import enum


class DesignGoal(str, enum.Enum):
    MAX_THROUGHPUT = "throughput"
    MIN_ENERGY = "energy"
    MIN_EDP = "edp"

    @classmethod
    def parse(cls, value: "str | DesignGoal") -> "DesignGoal":
        if isinstance(value, DesignGoal):
            return value
        aliases = {"maxthroughput": "throughput", "minenergy": "energy", "minedp": "edp"}
        key = str(value).lower().replace("_", "")
        return cls(aliases.get(key, key))

    def objective(self, result) -> float:
        """Cycles, joules or joule-seconds of an evaluation result."""
        if self is DesignGoal.MAX_THROUGHPUT:
            return float(result.cycles)
        if self is DesignGoal.MIN_ENERGY:
            return result.energy
        return result.edp
