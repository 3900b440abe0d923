import numpy as np

from loralign.autodiff import Tape


def numeric_grad(f, p, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``p.value``."""
    out = np.zeros_like(p.value)
    it = np.nditer(p.value, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p.value[i]
        p.value[i] = old + h
        up = f()
        p.value[i] = old - h
        down = f()
        p.value[i] = old
        out[i] = (up - down) / (2 * h)
    return out


def analytic_grads(build, params):
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = build(tape)
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def scalar(build):
    return lambda: build(Tape()).value.item()


def three_layer_problem(rng, w_align=100.0):
    """L1 + w_align * alignment loss over a 3-layer adapted MLP.

    Returns ``(build, params)`` where ``params`` are every A and B factor.
    Targets sit at least 0.1 away from the outputs so no residual is near the l1 kink.
    """
    from loralign.align import build_reference_frames, mean_align_loss
    from loralign.autodiff import Param
    from loralign.lora import AdaptedLinear, init_adapter, lora_forward

    class ThreeLayer:
        def __init__(self):
            self.layers = {}
            for i, (m, n) in enumerate([(6, 5), (5, 5), (5, 4)]):
                name = f"enc.{i}.mlp.fc1"
                layer = AdaptedLinear(name, Param(rng.normal(size=(m, n)), trainable=False))
                layer.adapter = init_adapter(m, n, 2, i, name)
                self.layers[name] = layer

        def forward(self, tape, x):
            h = x
            for i, layer in enumerate(self.layers.values()):
                h = lora_forward(tape, layer, h)
                if i < 2:
                    h = tape.record("gelu", h)
            return h

    model = ThreeLayer()
    frames = build_reference_frames(model, 3)
    for layer in model.layers.values():
        layer.adapter.B.value[...] = 0.2 * rng.normal(size=layer.adapter.B.shape)
    x = rng.normal(size=(7, 6))
    out = model.forward(Tape(), x).value
    y = out + np.where(rng.random(out.shape) < 0.5, -1.0, 1.0) * (0.1 + rng.random(out.shape))

    def build(tape):
        l1 = tape.l1_loss(model.forward(tape, x), y)
        return tape.add(l1, tape.scale(mean_align_loss(tape, model, frames, 3, 7.0), w_align))

    params = [p for layer in model.layers.values() for p in (layer.adapter.A, layer.adapter.B)]
    return build, params
