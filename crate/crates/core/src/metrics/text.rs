const ARTICLES: [&str; 3] = ["a", "an", "the"];

const DIGIT_WORDS: [(&str, &str); 11] = [
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
];

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercases, strips punctuation and symbols (apostrophes survive only
/// between two alphanumerics), drops the articles "a", "an", "the", maps the
/// number words zero..ten to digits and collapses whitespace.
///
/// Every removed character is replaced by a space, so "hot-dog" becomes
/// "hot dog". The function is idempotent.
pub fn normalize_answer(raw: &str) -> String {
    let chars: Vec<char> = raw.chars().flat_map(char::to_lowercase).collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            cleaned.push(c);
        } else if is_apostrophe(c)
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            cleaned.push('\'');
        } else {
            cleaned.push(' ');
        }
    }
    cleaned
        .split_whitespace()
        .filter(|token| !ARTICLES.contains(token))
        .map(|token| {
            DIGIT_WORDS
                .iter()
                .find(|(word, _)| *word == token)
                .map_or(token, |(_, digit)| digit)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Character-level edit distance with unit insert/delete/substitute costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            curr[j + 1] = substitute.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Edit distance divided by the ground truth's character count. Inputs are
/// expected to be normalized already. An empty ground truth counts as length
/// one, so any non-empty prediction gets a CER of at least 1.
pub fn char_error_rate(pred: &str, gt: &str) -> f64 {
    let gt_len = gt.chars().count();
    let distance = levenshtein(pred, gt);
    distance as f64 / gt_len.max(1) as f64
}
