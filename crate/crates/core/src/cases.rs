//! Bundled desk-scale cases.

use crate::grid::{parse_case, GridCase};

pub const CASE2: &str = include_str!("../cases/case2.json");
pub const CASE3RING: &str = include_str!("../cases/case3ring.json");
pub const CASE14: &str = include_str!("../cases/case14.json");
/// Cheap generation behind a two-line corridor; used for post-contingency attack studies.
pub const CASE6CORRIDOR: &str = include_str!("../cases/case6corridor.json");

/// Names accepted by [`bundled`].
pub const NAMES: &[&str] = &["case2", "case3ring", "case6corridor", "case14"];

pub fn bundled(name: &str) -> Option<&'static str> {
    match name.trim_end_matches(".json") {
        "case2" => Some(CASE2),
        "case3ring" => Some(CASE3RING),
        "case14" => Some(CASE14),
        "case6corridor" => Some(CASE6CORRIDOR),
        _ => None,
    }
}

pub fn case2() -> GridCase {
    parse_case(CASE2).expect("bundled case2 is valid")
}

pub fn case3ring() -> GridCase {
    parse_case(CASE3RING).expect("bundled case3ring is valid")
}

pub fn case6corridor() -> GridCase {
    parse_case(CASE6CORRIDOR).expect("bundled case6corridor is valid")
}

pub fn case14() -> GridCase {
    parse_case(CASE14).expect("bundled case14 is valid")
}
