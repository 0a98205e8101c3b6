"""Side-by-side stylizations of a few source images.

Rows: source image, uniform blends at three strengths, and the semantic
hallucination path with a freshly initialised and a randomly perturbed dFT.

    python demos/hallucination_gallery.py --out gallery.png [--autoencoder ae.bin]
"""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from ashplus.config import TrainConfig
from ashplus.dft import DualFeatureTransform, hallucinate, uniform_hallucinate
from ashplus.experiment import WorldSettings, build_world, load_autoencoder, pretrain_world_autoencoder
from ashplus.nets import SegNet


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="gallery.png")
    ap.add_argument("--autoencoder", help="checkpoint from `ashplus pretrain-ae`; trained briefly if omitted")
    ap.add_argument("--n", type=int, default=4)
    args = ap.parse_args()

    torch.manual_seed(0)
    settings = WorldSettings(n_train=64, n_eval=8, k_targets=2, style_pool_size=32, ae_epochs=10)
    world = build_world(settings)
    if args.autoencoder:
        enc, dec = load_autoencoder(args.autoencoder)
    else:
        print("pretraining a small autoencoder (10 epochs) ...")
        enc, dec = pretrain_world_autoencoder(world, settings)

    X = world.train.image_tensor()[:args.n]
    style = world.style_pool[:args.n]
    seg = SegNet(8)
    cfg = TrainConfig()
    rows = {"source": X}
    with torch.no_grad():
        for w in (0.8, 0.5, 0.1):
            rows[f"uniform w={w}"] = uniform_hallucinate(X, style, enc, dec, w)
        dft = DualFeatureTransform(8, enc.channels[-1])
        rows["dFT at init"], _ = hallucinate(X, style, seg, enc, dec, dft, cfg, seed=0)
        for p in dft.parameters():
            p.add_(0.05 * torch.randn_like(p))
        rows["dFT perturbed"], _ = hallucinate(X, style, seg, enc, dec, dft, cfg, seed=0)

    fig, axes = plt.subplots(len(rows), args.n, figsize=(1.6 * args.n, 1.6 * len(rows)))
    for r, (name, imgs) in enumerate(rows.items()):
        for c in range(args.n):
            axes[r, c].imshow(imgs[c].permute(1, 2, 0).clamp(0, 1).numpy())
            axes[r, c].axis("off")
        axes[r, 0].set_title(name, fontsize=7, loc="left")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
