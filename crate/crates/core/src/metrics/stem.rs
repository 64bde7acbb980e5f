/// Irregular forms mapped to their base before suffix stripping.
const IRREGULAR: &[(&str, &str)] = &[
    ("built", "build"),
    ("rebuilt", "rebuild"),
    ("was", "be"),
    ("were", "be"),
    ("is", "be"),
    ("are", "be"),
    ("been", "be"),
    ("has", "have"),
    ("had", "have"),
    ("gone", "go"),
    ("went", "go"),
    ("shown", "show"),
    ("grown", "grow"),
    ("grew", "grow"),
    ("made", "make"),
    ("laid", "lay"),
    ("torn", "tear"),
    ("houses", "house"),
    ("trees", "tree"),
    ("villas", "villa"),
];

const SUFFIXES: &[(&str, &str)] = &[
    ("ings", ""),
    ("ing", ""),
    ("ies", "y"),
    ("ied", "y"),
    ("es", ""),
    ("ed", ""),
    ("s", ""),
];

/// Light English stemmer: irregular table, one suffix strip, trailing `e`
/// dropped. Words of three letters or fewer are left alone.
pub fn stem(word: &str) -> String {
    if let Some((_, base)) = IRREGULAR.iter().find(|(w, _)| *w == word) {
        return strip_e(base);
    }
    if word.chars().count() <= 3 {
        return word.to_string();
    }
    for (suffix, repl) in SUFFIXES {
        if let Some(root) = word.strip_suffix(suffix) {
            if root.chars().count() >= 3 && !(suffix == &"s" && root.ends_with('s')) {
                return strip_e(&format!("{root}{repl}"));
            }
        }
    }
    strip_e(word)
}

fn strip_e(w: &str) -> String {
    match w.strip_suffix('e') {
        Some(root) if root.chars().count() >= 3 => root.to_string(),
        _ => w.to_string(),
    }
}
