//! Versioned prompt templates, shipped as text assets under
//! `assets/prompts/<version>/` and filled by simple `{placeholder}`
//! substitution.
//!
//! Exemplar annotations are conveyed structurally (pixel coordinates plus the
//! fixed region color palette below) rather than burned into the image bytes.

use crate::keypoints::Region;

pub const PROMPT_VERSION: &str = "v1";

pub const REGION_DETECT: &str = include_str!("../../assets/prompts/v1/region_detect.txt");
pub const REGION_ASSIGN: &str = include_str!("../../assets/prompts/v1/region_assign.txt");
pub const RECONCILE: &str = include_str!("../../assets/prompts/v1/reconcile.txt");
pub const CAPTION: &str = include_str!("../../assets/prompts/v1/caption.txt");
pub const MERGE: &str = include_str!("../../assets/prompts/v1/merge.txt");

/// Fixed palette for exemplar region annotations.
pub fn region_color(region: Region) -> &'static str {
    match region {
        Region::Ears => "red",
        Region::Back => "green",
        Region::Paws => "blue",
        Region::Tail => "yellow",
    }
}

/// Fills `{name}` placeholders in a template. Unknown placeholders are left
/// intact (JSON braces in the templates stay untouched because their content
/// never matches a substitution name).
pub fn fill(template: &str, substitutions: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (name, value) in substitutions {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_only_named_placeholders() {
        let filled = fill(
            "box {color} at {crop}; schema {\"x0\": <float>}",
            &[("color", "red".into()), ("crop", "(0,0)-(10,10)".into())],
        );
        assert_eq!(filled, "box red at (0,0)-(10,10); schema {\"x0\": <float>}");
    }

    #[test]
    fn templates_carry_their_placeholders() {
        assert!(REGION_DETECT.contains("{region}"));
        assert!(REGION_ASSIGN.contains("{candidates}"));
        assert!(RECONCILE.contains("{conflicts}"));
        assert!(CAPTION.contains("{frame_count}"));
        assert!(MERGE.contains("{last_index}"));
    }
}
