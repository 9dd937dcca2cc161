from typing import Any, Callable, Dict, List
import json
from pathlib import Path

import numpy as np
import pytest


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture()
def small_config() -> Dict[str, Any]:
    """Two AWGN layers small enough for a quick end-to-end run"""
    return {
        "model": {
            "field": "complex",
            "prior": {"type": "qpsk"},
            "layers": [
                {"rows": 64, "cols": 64, "channel": {"snr_db": 20}},
                {"rows": 128, "cols": 64, "channel": {"snr_db": 15}},
            ],
        },
        "run": {"trials": 2, "iters": 5, "seed": 7},
    }


@pytest.fixture()
def write_config(tmp_path: Path) -> Callable[[Any], str]:
    counter: List[int] = []

    def write(document: Any) -> str:
        counter.append(0)
        path = tmp_path / f"config{len(counter)}.json"
        with open(path, "w") as f:
            if isinstance(document, str):
                f.write(document)
            else:
                json.dump(document, f)
        return str(path)

    return write
