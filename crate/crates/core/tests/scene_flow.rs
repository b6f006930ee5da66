use avseg_core::mask::postmask_label;
use avseg_core::toy::scene::{ObjectRole, SceneConfig};
use avseg_core::toy::train::flow_masks;
use avseg_core::toy::gen_scene;
use avseg_core::flow::{frame_diff_flow, temporal_align};

#[test]
fn stationary_sounder_is_outside_the_post_label() {
    let cfg = SceneConfig {
        stationary_prob: 1.0,
        ..SceneConfig::default()
    };
    for seed in 0..20 {
        let sc = gen_scene(seed, &cfg).unwrap();
        let still = sc
            .objects
            .iter()
            .find(|o| o.role == ObjectRole::StationarySounding)
            .expect("stationary object requested");
        let aligned = temporal_align(&frame_diff_flow(&sc.frames).unwrap());
        let flow = flow_masks(&sc.frames, 0.05).unwrap();
        let s = cfg.object_size;
        let (oy, ox) = still.track[0];
        for t in 0..sc.len() {
            let post = postmask_label(&flow[t], &sc.gt_masks[t]).unwrap();
            let mag = aligned.frames()[t].magnitude();
            for y in oy..oy + s {
                for x in ox..ox + s {
                    assert!(sc.gt_masks[t].get(y, x), "seed {seed}: stationary pixel not in gt");
                    assert_eq!(mag[y * cfg.size + x], 0.0, "seed {seed}: motion on a still object");
                    assert!(!post.get(y, x), "seed {seed}: still pixel in the post label");
                }
            }
        }
        // The moving sounder does reach the label.
        let post: usize = (0..sc.len())
            .map(|t| postmask_label(&flow[t], &sc.gt_masks[t]).unwrap().count())
            .sum();
        assert!(post > 0, "seed {seed}");
    }
}
