//! Plain-text `name value` metrics exposition and its parser.

use std::collections::BTreeMap;
use std::fmt::Write;

#[derive(Debug, Default)]
pub struct MetricsText {
    out: String,
}

impl MetricsText {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn global(&mut self, name: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{name} {value}");
        self
    }

    pub fn function(
        &mut self,
        name: &str,
        function: &str,
        value: impl std::fmt::Display,
    ) -> &mut Self {
        let _ = writeln!(self.out, "{name}{{function=\"{function}\"}} {value}");
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Parses exposition text into `key -> value`, where `key` keeps any label
/// suffix verbatim.
pub fn parse_metrics(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.trim().rsplit_once(' ')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_parse() {
        let mut m = MetricsText::new();
        m.global("store_writes", 3).function("inflight", "f", 2);
        let text = m.finish();
        assert_eq!(text, "store_writes 3\ninflight{function=\"f\"} 2\n");
        let parsed = parse_metrics(&text);
        assert_eq!(parsed["store_writes"], 3.0);
        assert_eq!(parsed["inflight{function=\"f\"}"], 2.0);
    }
}
