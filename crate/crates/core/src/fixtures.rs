//! Bundled dependency parses for a small set of referring expressions,
//! written by hand in the layout of a spaCy `en_core_web_sm` parse.

use crate::text::ParseFile;

const NP_PARSES: &str = include_str!("../fixtures/np_parses.json");

/// Parses of the bundled expressions, in file order.
pub fn np_parses() -> ParseFile {
    serde_json::from_str(NP_PARSES).expect("bundled parse fixture is valid JSON")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_parse_validates() {
        let file = np_parses();
        assert_eq!(file.parses.len(), 19);
        for (expr, tree) in &file.parses {
            tree.validate().unwrap_or_else(|e| panic!("{expr}: {e}"));
        }
    }
}
