"""Show that the coupling core inverts exactly, and what breaks when it is misused.

    python demos/invertibility.py
"""

import numpy as np

from inn_ldct import tensor as T
from inn_ldct.model import DenoiserModel, ModelConfig, randomize_projections
from inn_ldct.tensor import Tensor


def main():
    cfg = ModelConfig(channels=8, blocks=4, dtype="float64")
    model = DenoiserModel(cfg, seed=0)
    x = Tensor(np.random.default_rng(1).standard_normal((2, cfg.channels, 8, 8)))

    with T.no_grad():
        # fresh model: zero projections, every block is the identity
        same = model.core_forward(x).data.tobytes() == x.data.tobytes()
        print(f"fresh core is the identity: {same}")

        randomize_projections(model.parameters(), np.random.default_rng(2), 0.01)
        y = model.core_forward(x)
        back = model.core_inverse(y)
        print(f"random parameters: |y - x| max {np.abs(y.data - x.data).max():.3f}, "
              f"roundtrip error {np.abs(back.data - x.data).max():.2e}")

        # running the blocks' inverses in forward order is not an inverse
        order = list(range(cfg.blocks))
        wrong = model.core.inverse(y, order=order)
        print(f"inverse applied in the wrong block order: error {np.abs(wrong.data - x.data).max():.2e}")


if __name__ == "__main__":
    main()
