//! Fixed caption grammar. Five sentence frames per relevant event type; the
//! k-th caption of a sample uses the same frame for every event it joins.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ChangeEvent, EventKind, Polarity, Rect, CAPTIONS_PER_SAMPLE};

pub const NO_CHANGE_CAPTION: &str = "the scene is the same as before";

const BUILDING_APPEAR: [&str; 5] = [
    "a building appears at the {}",
    "a new building is built at the {}",
    "a house is constructed at the {}",
    "there is a new building at the {}",
    "a building shows up at the {}",
];

const BUILDING_DISAPPEAR: [&str; 5] = [
    "a building disappears from the {}",
    "a building is removed at the {}",
    "a house is demolished at the {}",
    "the building at the {} is gone",
    "a building at the {} was torn down",
];

const ROAD_APPEAR: [&str; 5] = [
    "a road appears at the {}",
    "a new road is built at the {}",
    "a road is constructed at the {}",
    "there is a new road at the {}",
    "a road shows up at the {}",
];

const ROAD_DISAPPEAR: [&str; 5] = [
    "a road disappears from the {}",
    "a road is removed at the {}",
    "a road is destroyed at the {}",
    "the road at the {} is gone",
    "a road at the {} was torn up",
];

/// Coarse 3×3 location of a rectangle's centre inside a square image.
pub fn region_phrase(rect: &Rect, image_size: usize) -> &'static str {
    let (cx, cy) = rect.center();
    let third = image_size as f64 / 3.0;
    let band = |v: f64| if v < third { 0 } else if v > 2.0 * third { 2 } else { 1 };
    match (band(cy), band(cx)) {
        (0, 0) => "top left",
        (0, 1) => "top",
        (0, 2) => "top right",
        (1, 0) => "left",
        (1, 1) => "center",
        (1, 2) => "right",
        (2, 0) => "bottom left",
        (2, 1) => "bottom",
        _ => "bottom right",
    }
}

fn frames(event: &ChangeEvent) -> Option<&'static [&'static str; 5]> {
    match (event.kind, event.polarity) {
        (EventKind::Building, Polarity::Appear) => Some(&BUILDING_APPEAR),
        (EventKind::Building, Polarity::Disappear) => Some(&BUILDING_DISAPPEAR),
        (EventKind::Road, Polarity::Appear) => Some(&ROAD_APPEAR),
        (EventKind::Road, Polarity::Disappear) => Some(&ROAD_DISAPPEAR),
        (EventKind::Tree, _) => None,
    }
}

/// Five paraphrases describing the relevant events. Tree events are ignored;
/// with no relevant events every caption is [`NO_CHANGE_CAPTION`].
/// Events are described in reading order (top to bottom, then left to right).
/// `template_rng` only decides the order of the five frames.
pub fn render_captions(events: &[ChangeEvent], image_size: usize, template_rng: &mut impl Rng) -> Vec<String> {
    let mut sorted: Vec<&ChangeEvent> = events.iter().collect();
    sorted.sort_by_key(|e| (e.rect.y, e.rect.x, e.kind as u8, e.polarity as u8));
    let relevant: Vec<(&[&str; 5], &str)> = sorted
        .into_iter()
        .filter_map(|e| frames(e).map(|f| (f, region_phrase(&e.rect, image_size))))
        .collect();
    if relevant.is_empty() {
        return vec![NO_CHANGE_CAPTION.to_string(); CAPTIONS_PER_SAMPLE];
    }
    let mut order: Vec<usize> = (0..CAPTIONS_PER_SAMPLE).collect();
    order.shuffle(template_rng);
    order
        .into_iter()
        .map(|variant| {
            relevant
                .iter()
                .map(|(f, place)| f[variant].replace("{}", place))
                .collect::<Vec<_>>()
                .join(" and ")
        })
        .collect()
}
