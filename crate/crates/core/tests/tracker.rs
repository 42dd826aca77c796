//! End-to-end behavior of the tracker on small synthetic frames with the
//! built-in feature provider.

use sdt_core::features::StandInProvider;
use sdt_core::tracker::{Tracker, TrackerOptions, UpdateSource};
use sdt_core::{gaussian_map, iou, BoundingBox, Image, TrackerConfig};
use std::sync::{Arc, OnceLock};

const W: usize = 240;
const H: usize = 180;

/// A target with four differently colored quadrants on a mildly textured
/// background.
fn frame(cx: f64, cy: f64, gray: bool) -> Image {
    let colors = [[0.9, 0.2, 0.1], [0.95, 0.85, 0.1], [0.1, 0.3, 0.9], [0.2, 0.8, 0.3]];
    let img = Image::from_fn(W, H, 3, |x, y, c| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (fx - cx, fy - cy);
        if dx.abs() < 18.0 && dy.abs() < 14.0 {
            let q = (dx >= 0.0) as usize + 2 * (dy >= 0.0) as usize;
            colors[q][c]
        } else {
            let n = ((x * 7 + y * 13) % 17) as f32 / 17.0;
            [0.45 + 0.08 * n, 0.5, 0.48 + 0.06 * n][c]
        }
    });
    if gray {
        let i = img.intensity().into_iter().map(|v| v as f32).collect();
        Image::new(W, H, 1, i).unwrap()
    } else {
        img
    }
}

fn gt() -> BoundingBox {
    BoundingBox::new(110.0, 90.0, 36.0, 28.0)
}

fn cfg() -> TrackerConfig {
    TrackerConfig { seed: 5, ..TrackerConfig::default() }
}

fn initialized() -> &'static Tracker {
    static T: OnceLock<Tracker> = OnceLock::new();
    T.get_or_init(|| {
        let provider = Arc::new(StandInProvider::new(46));
        Tracker::init(&frame(110.0, 90.0, false), &gt(), &cfg(), TrackerOptions::default(), provider).unwrap().0
    })
}

#[test]
fn holistic_head_reproduces_its_target() {
    let t = initialized();
    let maps = t.last_maps().unwrap();
    let target = gaussian_map(&maps.roi.box_to_map(&gt()), 46, 46, cfg().gaussian_sigma_factor).unwrap();
    let ncc = maps.holistic.ncc(&target);
    assert!(ncc > 0.8, "ncc {ncc}");
}

#[test]
fn static_sequence_stays_on_target() {
    let mut t = initialized().clone();
    for _ in 0..6 {
        let r = t.track(&frame(110.0, 90.0, false));
        assert!(r.error.is_none(), "{:?}", r.error);
        let overlap = iou(&r.estimate(), &gt());
        assert!(overlap > 0.8, "frame {} iou {overlap}", r.frame);
    }
}

#[test]
fn part_heads_never_change() {
    let mut t = initialized().clone();
    t.set_options(TrackerOptions { update: UpdateSource::CurrentFrame, ..TrackerOptions::default() });
    let before: Vec<Vec<u8>> = t.ensemble().pnets().iter().map(|p| p.to_bytes()).collect();
    let hnet_before = t.ensemble().hnet.to_bytes();
    let mut fired = false;
    for i in 0..10 {
        let r = t.track(&frame(110.0 + i as f64, 90.0, false));
        fired |= r.update_fired;
    }
    assert!(fired, "a checkpoint update should have run at frame 10");
    assert_ne!(t.ensemble().hnet.to_bytes(), hnet_before);
    let after: Vec<Vec<u8>> = t.ensemble().pnets().iter().map(|p| p.to_bytes()).collect();
    assert_eq!(before, after);
}

#[test]
fn no_updates_when_disabled() {
    let mut t = initialized().clone();
    t.set_options(TrackerOptions { update: UpdateSource::Disabled, ..TrackerOptions::default() });
    let hnet_before = t.ensemble().hnet.to_bytes();
    for _ in 0..10 {
        assert!(!t.track(&frame(110.0, 90.0, false)).update_fired);
    }
    assert_eq!(t.ensemble().hnet.to_bytes(), hnet_before);
}

#[test]
fn grayscale_frames_skip_the_prior() {
    let mut t = initialized().clone();
    let r = t.track(&frame(112.0, 90.0, true));
    assert!(r.error.is_none(), "{:?}", r.error);
    assert!(!r.used_prior);
    assert!(t.last_maps().unwrap().saliency.is_none());
}

#[test]
fn forks_replay_identically() {
    let base = initialized();
    let run = || {
        let mut t = base.clone();
        (0..3).map(|i| t.track(&frame(110.0 + 2.0 * i as f64, 91.0, false))).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn tiny_boxes_are_rejected() {
    let provider = Arc::new(StandInProvider::new(46));
    let b = BoundingBox::new(110.0, 90.0, 6.0, 20.0);
    assert!(Tracker::init(&frame(110.0, 90.0, false), &b, &cfg(), TrackerOptions::default(), provider).is_err());
}
