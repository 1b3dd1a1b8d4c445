"""Smoke test for the vedit Python module.

Build and install first:

    pip install --no-build-isolation ./crates/py

Trains a deliberately tiny model, so edits are rough; this checks the
bindings, not edit quality.
"""

import os
import sys
import tempfile

import vedit


def main():
    assert "recolor_fg" in vedit.EDIT_CODES
    assert vedit.parse_instruction("RECOLOR_FG:0.50") == "recolor_fg:0.5"
    try:
        vedit.parse_instruction("recolor_fg:3")
    except ValueError as e:
        assert "outside" in str(e)
    else:
        raise AssertionError("out-of-range parameter accepted")

    scene = vedit.Scene.generate(3, frames=4, resolution=16, code="recolor_fg")
    video = scene.video
    assert len(video) == 4 and (video.height, video.width) == (16, 16)
    assert len(video.frame(0)) == 16 * 16 * 3
    masks = scene.masks()
    assert len(masks) == 4 and set(masks[0]) <= {0, 1}

    same = scene.evaluate(video)
    assert same["pixel_mse"] >= 0.0
    assert same["edit_accuracy"] == 0.0

    model = vedit.Model.train(
        1,
        settings={"train_steps": 20, "train_pairs": 16, "channels": "8,8,8", "resolution": 16},
    )
    edited = model.edit(
        video,
        scene.instruction,
        seed=5,
        masks=masks,
        settings={"steps": 4, "adapt_steps": "0-3", "tta": False},
    )
    assert len(edited) == 4
    assert all(0.0 <= v <= 1.0 for v in edited.frame(2))
    report = scene.evaluate(edited)
    assert 0.0 <= report["tem_con"] <= 1.0

    again = model.edit(video, scene.instruction, seed=5, masks=masks, settings={"steps": 4, "adapt_steps": "0-3", "tta": False})
    assert again.to_list() == edited.to_list(), "edits are not reproducible"

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model")
        model.save(path)
        vedit.Model.load(path)
        edited.save(os.path.join(d, "frames"))
        back = vedit.Video.load(os.path.join(d, "frames"))
        assert len(back) == 4
        assert vedit.run_cli(["gen", "--seed", "2", "--output", os.path.join(d, "gen")]) == 0
        assert vedit.run_cli(["edit", "--checkpoint", os.path.join(d, "missing")]) != 0

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
