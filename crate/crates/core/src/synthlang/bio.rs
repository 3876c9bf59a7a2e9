//! BIO span helpers shared by the generator and the span scorer.

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub label: String,
}

fn split_tag(tag: &str) -> Option<(char, &str)> {
    let mut it = tag.splitn(2, '-');
    let prefix = it.next()?;
    let label = it.next()?;
    match prefix {
        "B" => Some(('B', label)),
        "I" => Some(('I', label)),
        _ => None,
    }
}

/// Maximal typed spans. An `I-X` that does not continue an `X` span opens a
/// new one (the usual repair rule); anything that is not `B-`/`I-` is outside.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        match split_tag(tag.as_ref()) {
            Some(('I', label)) if open.as_ref().is_some_and(|s| s.label == label) => {
                if let Some(s) = open.as_mut() {
                    s.end = i + 1;
                }
            }
            Some((_, label)) => {
                spans.extend(open.take());
                open = Some(Span {
                    start: i,
                    end: i + 1,
                    label: label.to_string(),
                });
            }
            None => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    spans
}

/// No `I-X` without a preceding `B-X` or `I-X`.
pub fn is_well_formed<S: AsRef<str>>(tags: &[S]) -> bool {
    let mut prev: Option<&str> = None;
    for tag in tags {
        let tag = tag.as_ref();
        if let Some(('I', label)) = split_tag(tag) {
            if prev.and_then(split_tag).map(|(_, l)| l) != Some(label) {
                return false;
            }
        }
        prev = Some(tag);
    }
    true
}

pub fn spans_to_tags(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for s in spans {
        for (k, t) in tags[s.start..s.end].iter_mut().enumerate() {
            *t = format!("{}-{}", if k == 0 { "B" } else { "I" }, s.label);
        }
    }
    tags
}

/// Carry tags across a reordering where `alignment[i]` is the origin position
/// of output word `i`. Each span is re-tagged over its new positions; a span
/// whose words end up apart gets one `B-` per contiguous run.
pub fn project_tags<S: AsRef<str>>(tags: &[S], alignment: &[usize]) -> Vec<String> {
    let spans = extract_spans(tags);
    let mut span_of = vec![None; tags.len()];
    for (k, s) in spans.iter().enumerate() {
        for slot in &mut span_of[s.start..s.end] {
            *slot = Some(k);
        }
    }
    let mut out = vec!["O".to_string(); alignment.len()];
    let mut prev: Option<usize> = None;
    for (i, &a) in alignment.iter().enumerate() {
        let cur = span_of.get(a).copied().flatten();
        if let Some(k) = cur {
            let prefix = if prev == Some(k) { "I" } else { "B" };
            out[i] = format!("{prefix}-{}", spans[k].label);
        }
        prev = cur;
    }
    out
}
