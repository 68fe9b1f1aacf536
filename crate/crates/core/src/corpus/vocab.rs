//! Fixed attribute vocabulary for queries.

pub const NULL: usize = 0;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"];
pub const SHAPES: [&str; 5] = ["square", "circle", "triangle", "stripes", "noise"];
pub const LOCATIONS: [&str; 5] = ["top-left", "top-right", "bottom-left", "bottom-right", "center"];

pub const COLOR_BASE: usize = 1;
pub const SHAPE_BASE: usize = COLOR_BASE + COLORS.len();
pub const LOCATION_BASE: usize = SHAPE_BASE + SHAPES.len();
pub const SIZE: usize = LOCATION_BASE + LOCATIONS.len();

/// Longest query prefix the generator accepts.
pub const MAX_PREFIX: usize = 8;

pub const PALETTE: [[f32; 3]; 8] = [
    [0.92, 0.15, 0.15],
    [0.20, 0.80, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.90, 0.20],
    [0.20, 0.90, 0.90],
    [0.90, 0.25, 0.85],
    [0.95, 0.95, 0.95],
    [1.00, 0.55, 0.10],
];

pub fn word(id: usize) -> Option<&'static str> {
    match id {
        NULL => Some("null"),
        i if i < SHAPE_BASE => Some(COLORS[i - COLOR_BASE]),
        i if i < LOCATION_BASE => Some(SHAPES[i - SHAPE_BASE]),
        i if i < SIZE => Some(LOCATIONS[i - LOCATION_BASE]),
        _ => None,
    }
}

pub fn id(word: &str) -> Option<usize> {
    (0..SIZE).find(|&i| self::word(i) == Some(word))
}

/// Parses whitespace- or comma-separated words.
pub fn parse(text: &str) -> Option<Vec<usize>> {
    let ids: Option<Vec<usize>> = text.split(|c: char| c.is_whitespace() || c == ',').filter(|w| !w.is_empty()).map(id).collect();
    ids.filter(|v| !v.is_empty() && v.len() <= MAX_PREFIX)
}
