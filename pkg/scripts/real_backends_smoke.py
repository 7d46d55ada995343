#!/usr/bin/env python3
"""One-image smoke run with real model backends (not part of CI).

Requires the optional [real] dependencies plus locally available weights:

    pip install torch transformers diffusers
    python scripts/real_backends_smoke.py --image path/to/image.png \
        --target-object "a stop sign" --target-prompt "a 50 mph speed limit sign"

Pipeline: CLIPSeg text-guided segmentation -> diffusion inpainting ->
CLIP-ViT patch features -> contrastive attack at eps=16/255. The script
verifies that x_target's background matches the input wherever the mask is
1 within the inpainting backend's documented tolerance, then runs a short
attack and reports the loss trajectory.
"""

import argparse
import sys

import numpy as np

from vlmadv.augmentation import TransformConfig
from vlmadv.optimizers import contrastive_adv
from vlmadv.replace import BinaryMask, InpaintingBackend, SegmentationBackend, replace
from vlmadv.storage import load_png, save_png
from vlmadv.types import AttackConfig, TargetSpec, as_image_array


class ClipSegBackend(SegmentationBackend):
    """Text-guided zero-shot segmentation via CIDAS/clipseg-rd64-refined."""

    backend_id = "clipseg"

    def __init__(self, model_name="CIDAS/clipseg-rd64-refined", device="cpu"):
        import torch
        from transformers import CLIPSegForImageSegmentation, CLIPSegProcessor

        self.torch = torch
        self.device = device
        self.processor = CLIPSegProcessor.from_pretrained(model_name)
        self.model = CLIPSegForImageSegmentation.from_pretrained(model_name) \
            .to(device).eval()

    def probability_map(self, x, target_object):
        from PIL import Image

        arr = as_image_array(x)
        pil = Image.fromarray((arr * 255).astype(np.uint8))
        inputs = self.processor(text=[target_object], images=[pil],
                                return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            logits = self.model(**inputs).logits
        prob = self.torch.sigmoid(logits)[None] if logits.ndim == 2 else self.torch.sigmoid(logits)
        prob = self.torch.nn.functional.interpolate(
            prob[None] if prob.ndim == 3 else prob,
            size=arr.shape[:2], mode="bilinear", align_corners=False,
        )[0, 0]
        return prob.cpu().numpy().astype(np.float64)


class DiffusionInpainter(InpaintingBackend):
    """Prompt-conditioned inpainting via stable-diffusion-2-inpainting.

    Generative models only approximately preserve the unmasked region; the
    documented background tolerance is 0.1 mean-abs per channel.
    """

    backend_id = "sd_inpaint"
    background_tolerance = 0.1

    def __init__(self, model_name="stabilityai/stable-diffusion-2-inpainting",
                 device="cpu", steps=20, seed=0):
        import torch
        from diffusers import StableDiffusionInpaintPipeline

        self.torch = torch
        self.pipe = StableDiffusionInpaintPipeline.from_pretrained(model_name) \
            .to(device)
        self.steps = steps
        self.seed = seed

    def fill(self, x, mask: BinaryMask, prompt):
        from PIL import Image

        arr = as_image_array(x)
        h, w = arr.shape[:2]
        pil = Image.fromarray((arr * 255).astype(np.uint8)).resize((512, 512))
        # diffusers expects white = fill region; our zero-region is the target
        mask_img = Image.fromarray(((1 - mask.grid) * 255).astype(np.uint8)) \
            .resize((512, 512))
        gen = self.torch.Generator().manual_seed(self.seed)
        out = self.pipe(prompt=prompt, image=pil, mask_image=mask_img,
                        num_inference_steps=self.steps, generator=gen).images[0]
        out = np.asarray(out.resize((w, h)), dtype=np.float64) / 255.0
        # restore the background exactly; only {m=0} keeps generated content
        m = mask.grid[:, :, None]
        return m * arr + (1 - m) * out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--image", required=True)
    parser.add_argument("--target-object", required=True)
    parser.add_argument("--target-prompt", required=True)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--steps", type=int, default=50, help="attack iterations")
    parser.add_argument("--out-prefix", default="smoke")
    args = parser.parse_args(argv)

    try:
        from vlmadv.encoders.real import ClipVisionBackend
        vis = ClipVisionBackend(device=args.device)
        seg = ClipSegBackend(device=args.device)
        inpaint = DiffusionInpainter(device=args.device)
    except Exception as exc:
        print(f"real backends unavailable: {exc}", file=sys.stderr)
        return 2

    x = load_png(args.image)
    if x.shape[:2] != vis.input_hw:
        from PIL import Image

        from vlmadv.types import ImageTensor

        pil = Image.fromarray((x.data * 255).astype(np.uint8)) \
            .resize(vis.input_hw[::-1], Image.BILINEAR)
        x = ImageTensor(np.asarray(pil, dtype=np.float64) / 255.0)

    spec = TargetSpec(args.target_object, args.target_prompt)
    out = replace(x, spec, seg_backend=seg, inpaint_backend=inpaint,
                  vis_backend=vis)

    background = out.mask.grid == 1
    deviation = np.abs(out.target_image.data - x.data)[background].mean()
    print(f"background mean-abs deviation: {deviation:.4f} "
          f"(tolerance {inpaint.background_tolerance})")
    assert deviation <= inpaint.background_tolerance

    cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=args.steps)
    result = contrastive_adv(x, out, cfg, "sign", vis_backend=vis,
                             transform_config=TransformConfig())
    print(f"loss: {result.loss_trace[0]:.4f} -> {result.loss_trace[-1]:.4f}")
    save_png(out.target_image, f"{args.out_prefix}_target.png")
    save_png(result.adversarial_image, f"{args.out_prefix}_adv.png")
    print(f"wrote {args.out_prefix}_target.png and {args.out_prefix}_adv.png")
    return 0


if __name__ == "__main__":
    sys.exit(main())
