"""Desk-scale calibration: trains AE + LDM on a phantom corpus and measures
reconstruction PSNR, conditioning fidelity, and background cleanliness."""

import sys
import time

import numpy as np
import torch

from histobalance.diffusion import (
    AutoencoderConfig,
    LdmConfig,
    ae_decode,
    ae_encode,
    load_autoencoder,
    psnr,
    train_autoencoder,
    train_ldm,
)
from histobalance.patches import extract_patches
from histobalance.phantom import PhantomStainClassifier, generate_phantom_slide
from histobalance.sampling import randomize_instance_subtypes
from histobalance.subtypes import by_code

AE_STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
LDM_STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 3000
LDM_LR = float(sys.argv[3]) if len(sys.argv) > 3 else 2e-3

patches = []
for i in range(8):
    img, mask, inst, doc = generate_phantom_slide(seed=100 + i, size=256, n_instances=24)
    patches += extract_patches(img, mask, inst, 64, 64, slide_id=doc.slide_id)
print(f"corpus: {len(patches)} patches", flush=True)

t0 = time.time()
ae_payload, ae_hist = train_autoencoder(patches, AutoencoderConfig(steps=AE_STEPS), seed=1)
ae = load_autoencoder(ae_payload)
print(f"AE trained {AE_STEPS} steps in {(time.time()-t0)/60:.1f} min, "
      f"final recon {np.mean(ae_hist['recon'][-50:]):.5f}", flush=True)

scores = [psnr(p.image, ae_decode(ae, ae_encode(ae, p.image))) for p in patches[:40]]
print(f"PSNR median {np.median(scores):.1f} dB  min {min(scores):.1f}  max {max(scores):.1f}", flush=True)

clf = PhantomStainClassifier()
tot, hit = {}, {}
for p in patches:
    recon = ae_decode(ae, ae_encode(ae, p.image))
    truth = {i: int(p.mask[p.instances == i][0]) for i in np.unique(p.instances) if i > 0}
    for inst, pred in clf.decode_instances(recon, p.instances, min_area=30).items():
        c = truth[inst]
        tot[c] = tot.get(c, 0) + 1
        hit[c] = hit.get(c, 0) + int(pred == c)
print("AE roundtrip decode:", {c: f"{hit.get(c,0)}/{tot[c]}" for c in sorted(tot)}, flush=True)

t0 = time.time()
ldm_payload, ldm_hist = train_ldm(
    patches, ae, LdmConfig(steps=LDM_STEPS, learning_rate=LDM_LR), seed=2
)
print(f"LDM trained {LDM_STEPS} steps in {(time.time()-t0)/60:.1f} min, "
      f"loss first50 {np.mean(ldm_hist['loss'][:50]):.4f} last50 {np.mean(ldm_hist['loss'][-50:]):.4f}",
      flush=True)

from histobalance.diffusion import ldm_sample_batch

tumor_patches = [p for p in patches if (p.mask > 0).sum() > 100]
t0 = time.time()
for code in (1, 2, 3, 4, 5):
    total = correct = 0
    masks, sources, seeds = [], [], []
    for k in range(20):
        src = tumor_patches[k % len(tumor_patches)]
        forced = randomize_instance_subtypes(src, [by_code(code)], seed=1000 + k)
        masks.append(forced)
        sources.append(src)
        seeds.append(5000 + 100 * code + k)
    for start in range(0, len(masks), 10):
        imgs = ldm_sample_batch(ldm_payload, ae, masks[start:start+10], seeds[start:start+10])
        for img, src in zip(imgs, sources[start:start+10]):
            decoded = clf.decode_instances(img, src.instances, min_area=30)
            total += len(decoded)
            correct += sum(1 for c in decoded.values() if c == code)
    print(f"class {code}: fidelity {correct}/{total} = {correct/max(total,1):.2f}", flush=True)
print(f"fidelity eval took {(time.time()-t0)/60:.1f} min", flush=True)

bg_mask = np.zeros((64, 64), dtype=np.uint8)
imgs = ldm_sample_batch(ldm_payload, ae, [bg_mask] * 20, list(range(20)))
clean = sum(1 for im in imgs if clf.count_tumor_signature_regions(im) == 0)
print(f"background-only masks: {clean}/20 clean", flush=True)

torch.save({"ae": ae_payload, "ldm": ldm_payload}, "/tmp/calib_ckpt.pt")
print("saved /tmp/calib_ckpt.pt", flush=True)
