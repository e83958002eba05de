//! Hand-rolled JSON output with fixed field order and explicit precision.
//!
//! Every float is printed with 15 significant digits (`{:.14e}`) so repeated
//! runs — including cross-platform ones — diff cleanly byte for byte.
//! Non-finite values have no JSON representation and become `null`.

pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.14e}")
    } else {
        "null".to_string()
    }
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map_or("null".to_string(), num)
}

pub fn string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// An object rendered in insertion order with two-space indentation.
pub struct Obj {
    fields: Vec<(String, String)>,
}

impl Obj {
    pub fn new() -> Self {
        Obj { fields: Vec::new() }
    }

    /// `value` must already be rendered JSON.
    pub fn raw(mut self, key: &str, value: impl Into<String>) -> Self {
        self.fields.push((key.to_string(), value.into()));
        self
    }

    pub fn num(self, key: &str, x: f64) -> Self {
        self.raw(key, num(x))
    }

    pub fn opt_num(self, key: &str, x: Option<f64>) -> Self {
        self.raw(key, opt_num(x))
    }

    pub fn str(self, key: &str, s: &str) -> Self {
        self.raw(key, string(s))
    }

    pub fn bool(self, key: &str, b: bool) -> Self {
        self.raw(key, if b { "true" } else { "false" })
    }

    pub fn int(self, key: &str, v: u64) -> Self {
        self.raw(key, v.to_string())
    }

    pub fn render(&self) -> String {
        self.render_indented(0)
    }

    fn render_indented(&self, level: usize) -> String {
        let pad = "  ".repeat(level + 1);
        let mut out = String::from("{\n");
        for (i, (k, v)) in self.fields.iter().enumerate() {
            out.push_str(&pad);
            out.push_str(&string(k));
            out.push_str(": ");
            // Nested pre-rendered objects arrive with their own newlines;
            // re-indent them to this depth.
            out.push_str(&v.replace('\n', &format!("\n{pad}")));
            if i + 1 < self.fields.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str(&"  ".repeat(level));
        out.push('}');
        out
    }
}

pub fn array_str<'a>(values: impl IntoIterator<Item = &'a str>) -> String {
    let items: Vec<String> = values.into_iter().map(string).collect();
    format!("[{}]", items.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_significant_digits() {
        assert_eq!(num(26.4911), "2.64911000000000e1");
        assert_eq!(num(f64::NAN), "null");
    }

    #[test]
    fn object_rendering_is_ordered() {
        let o = Obj::new().num("b", 1.0).str("a", "x");
        let s = o.render();
        assert!(s.find("\"b\"").unwrap() < s.find("\"a\"").unwrap());
        assert!(s.starts_with("{\n") && s.ends_with('}'));
    }

    #[test]
    fn strings_are_escaped() {
        assert_eq!(string("a\"b\\c"), "\"a\\\"b\\\\c\"");
    }
}
