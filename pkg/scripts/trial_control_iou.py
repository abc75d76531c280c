"""Half-scale trial: does the control branch learn edge conditioning well
enough to clear the +0.15 view-0 edge-IoU gain over the unconditioned base?
"""
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from mvc.backbone import load_base_checkpoint, save_base_checkpoint, train_base
from mvc.cameras import absolute_canonical_poses
from mvc.config import load_config
from mvc.control import load_control_checkpoint, save_control_checkpoint, train_control
from mvc.data import edge_map, make_scene, render_scene, item_rng
from mvc.pipeline import data_config, edge_iou, sample_views, stream_window

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1200
config = load_config("configs/desk.yaml", overrides=[
    f"train_base.steps={steps}",
    f"train_control.steps={steps}",
    "out_dir=runs/trial",
])
out = Path(config.out_dir)
out.mkdir(parents=True, exist_ok=True)
dcfg = data_config(config)

t0 = time.time()
base_path = config.resolve_path("base")
if not base_path.exists():
    torch.manual_seed(config.seed)
    stream = stream_window(config.seed, dcfg, config.data.num_scenes)
    base, metrics = train_base(stream, config.train_base, config.model, log=lambda r: print("base", r, flush=True))
    save_base_checkpoint(base_path, base)
    print("base summary:", metrics[-1], flush=True)
base = load_base_checkpoint(base_path)
print(f"base ready at {time.time()-t0:.0f}s", flush=True)

ctrl_path = config.resolve_path("control")
if not ctrl_path.exists():
    torch.manual_seed(config.seed)
    stream = stream_window(config.seed + 1, dcfg, config.data.num_scenes)
    controlled, metrics = train_control(base, stream, config.train_control, log=lambda r: print("ctrl", r, flush=True))
    save_control_checkpoint(ctrl_path, controlled)
    print("control summary:", metrics[-1], flush=True)
controlled = load_control_checkpoint(ctrl_path, base)
print(f"control ready at {time.time()-t0:.0f}s", flush=True)

s = config.sample
pose0 = absolute_canonical_poses(s.distance, s.elevation_deg, s.azimuth0_deg, s.fov_deg)[0]
gains, cond_ious, base_ious = [], [], []
for i in range(8):
    scene = make_scene(item_rng(1234, i))
    view0 = render_scene(scene, pose0, config.model.image_size)
    condition = edge_map(view0, dcfg.canny_low, dcfg.canny_high, dcfg.canny_sigma)
    imgs_c = sample_views(config, base, controlled, scene.prompt, condition, seed=100 + i).numpy()
    imgs_b = sample_views(config, base, None, scene.prompt, None, seed=100 + i).numpy()
    iou_c = edge_iou(imgs_c[0], condition, dcfg)
    iou_b = edge_iou(imgs_b[0], condition, dcfg)
    cond_ious.append(iou_c)
    base_ious.append(iou_b)
    gains.append(iou_c - iou_b)
    print(f"scene {i}: prompt={scene.prompt.to_text()!r} cond IoU={iou_c:.3f} base IoU={iou_b:.3f} gain={iou_c-iou_b:+.3f}", flush=True)

print(f"\nmean cond={np.mean(cond_ious):.3f} base={np.mean(base_ious):.3f} gain={np.mean(gains):+.3f}")
print(f"total {time.time()-t0:.0f}s")
