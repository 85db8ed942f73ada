"""Pilot end-to-end unmixing run: train two-class at 64x64 on the synthetic
dataset, then report held-out per-channel PSNR/SSIM. Used to tune the
desk-scale defaults; the acceptance suite repeats this protocol."""

import sys
import time

import torch

from ui2i import metrics
from ui2i.data import list_image_files, read_image
from ui2i.models import GeneratorConfig
from ui2i.trainer import TrainConfig, load_generators, train


def evaluate(ckpt, data_root):
    pair, _ = load_generators(ckpt)
    psnr1, psnr2, ssim1, ssim2 = [], [], [], []
    with torch.no_grad():
        for path in list_image_files(f"{data_root}/test_pairs/mixed"):
            mixed, _ = read_image(path)
            gt1, _ = read_image(f"{data_root}/test_pairs/ch1/{path.name}")
            gt2, _ = read_image(f"{data_root}/test_pairs/ch2/{path.name}")
            x = torch.from_numpy(mixed).unsqueeze(0) * 2 - 1
            out, _ = pair.translate(x, "ba")
            out01 = ((out + 1) / 2).clamp(0, 1).squeeze(0).numpy()
            psnr1.append(metrics.psnr(out01[0], gt1[0]))
            psnr2.append(metrics.psnr(out01[1], gt2[0]))
            ssim1.append(metrics.ssim(out01[0], gt1[0]))
            ssim2.append(metrics.ssim(out01[1], gt2[0]))
    n = len(psnr1)
    print(f"n={n}")
    print(f"PSNR ch1 {sum(psnr1)/n:.2f} ch2 {sum(psnr2)/n:.2f}")
    print(f"SSIM ch1 {sum(ssim1)/n:.4f} ch2 {sum(ssim2)/n:.4f}")


def main():
    data_root = sys.argv[1] if len(sys.argv) > 1 else "/tmp/unmix_data"
    out_dir = sys.argv[2] if len(sys.argv) > 2 else "/tmp/pilot_run"
    iters = int(sys.argv[3]) if len(sys.argv) > 3 else 2000
    mcfg = GeneratorConfig(channels_a=2, channels_b=1, base_width=16, levels=3)
    tcfg = TrainConfig(iterations=iters, mode="two-class", patch_size=64,
                       seed=0, checkpoint_every=500, log_every=10)
    t0 = time.time()
    ckpt = train(mcfg, tcfg, f"{data_root}/domainA", f"{data_root}/domainB", out_dir)
    print(f"trained {iters} iters in {(time.time() - t0) / 60:.1f} min -> {ckpt}")
    evaluate(ckpt, data_root)


if __name__ == "__main__":
    main()
