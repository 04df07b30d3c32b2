"""Check every training objective against central differences.

The autodiff engine is small enough to read in one sitting, and every loss
in the package is built from its primitives.  Before trusting any training
result we compare reverse-mode gradients with finite differences on a toy
model: WSU cross-entropy, the KLD-regularised loss, the discriminator
loss, the adversarial composite, the character loss and the MTL mix.
"""

from aedadapt import aed
from aedadapt import autodiff as ad
from aedadapt.autodiff import Tape, Tensor
from aedadapt.gradcheck import THRESHOLD, toy_gradchecks


def main():
    # A two-parameter warm-up: d/dp sum(p * p) is 2p.
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(p * p)
    tape.backward(loss)
    print("grad of sum(p*p) at [1, 2]:", p.grad)

    # Teacher-forced posteriors of a random toy model are proper distributions.
    params = aed.init_aed_params(aed.AedConfig(feat_dim=4, vocab_size=6, enc_hidden=4, dim=4, att_dim=4), 0)
    lp = aed.aed_forward([[0.1, 0.2, 0.3, 0.4]] * 3, [2, 3, aed.EOS], params)
    print("posterior row sums:", ad.exp(lp).data.sum(axis=1))

    print(f"\nmax relative gradient error per objective (threshold {THRESHOLD:g}):")
    for name, err in toy_gradchecks(seed=0).items():
        print(f"  {name:9s} {err:.2e}  {'ok' if err < THRESHOLD else 'FAILED'}")


if __name__ == "__main__":
    main()
