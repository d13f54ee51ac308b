/// A sentence and its byte span `[start, end)` in the caption it came from.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Sentence {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split a caption on `.`, `!` or `?` followed by whitespace or the end of
/// the text. Spans exclude the whitespace between sentences and always
/// contain at least one entry.
pub fn split_sentences(caption: &str) -> Vec<Sentence> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = caption.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        let next_is_break = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
        if is_terminator(c) && next_is_break {
            let s = start.take().unwrap();
            let e = i + c.len_utf8();
            out.push(Sentence {
                text: caption[s..e].to_string(),
                start: s,
                end: e,
            });
        }
    }
    if let Some(s) = start {
        let e = caption.trim_end().len();
        out.push(Sentence {
            text: caption[s..e].to_string(),
            start: s,
            end: e,
        });
    }
    if out.is_empty() {
        out.push(Sentence {
            text: caption.to_string(),
            start: 0,
            end: caption.len(),
        });
    }
    out
}
