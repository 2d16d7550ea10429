//! The tagged turn language spoken by the policy, and prompt rendering.
//!
//! A well-formed turn is exactly one reasoning segment followed by exactly one
//! action segment, with nothing but whitespace around them:
//!
//! ```text
//! turn      := ws "<think>" text "</think>" ws action ws
//! action    := "<tool_call>" json "</tool_call>"
//!            | "<answer>" ranklist "</answer>"
//! ranklist  := ws int ((ws "," ws | ws1) int)* ws
//! ```
//!
//! `text` and the bodies may not contain any of the six tags. Tool-call bodies
//! are JSON objects:
//!
//! ```text
//! {"tool": "select_image", "indices": [2, 4]}
//! {"tool": "zoom_in", "target": 2, "bbox": [x0, y0, x1, y1]}
//! ```
//!
//! Window positions are 1-based and bounding boxes are normalised to `[0, 1]`.
//! Parsing is total: any byte string yields a [`ParsedTurn`], with the validity
//! flags recording whether it belongs to the tag and list languages.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::store::{Candidate, Query};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProtocolError {
    #[error("rank entry {value} outside 1..={window}")]
    OutOfRange { value: usize, window: usize },
    #[error("rank entry {0} repeated")]
    Duplicate(usize),
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("empty candidate window")]
    EmptyWindow,
    #[error("{0} has an image modality but no image reference")]
    MissingImage(String),
}

// ---------------------------------------------------------------------------
// Rank lists

/// An ordered list of distinct 1-based window positions, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankList(Vec<usize>);

impl RankList {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based rank of window position `pos`, if listed.
    pub fn rank_of(&self, pos: usize) -> Option<usize> {
        self.0.iter().position(|&p| p == pos).map(|i| i + 1)
    }

    pub fn is_permutation_of(&self, window: usize) -> bool {
        self.0.len() == window && check_entries(&self.0, window).is_ok()
    }
}

impl fmt::Display for RankList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_entries(entries: &[usize], window: usize) -> Result<(), ProtocolError> {
    let mut seen = vec![false; window + 1];
    for &v in entries {
        if v == 0 || v > window {
            return Err(ProtocolError::OutOfRange { value: v, window });
        }
        if std::mem::replace(&mut seen[v], true) {
            return Err(ProtocolError::Duplicate(v));
        }
    }
    Ok(())
}

/// Completes a partial answer: the listed positions first, then every missing
/// position in ascending order.
pub fn normalize_ranklist(partial: &[usize], window: usize) -> Result<RankList, ProtocolError> {
    check_entries(partial, window)?;
    let listed: BTreeSet<usize> = partial.iter().copied().collect();
    let mut order = partial.to_vec();
    order.extend((1..=window).filter(|p| !listed.contains(p)));
    Ok(RankList(order))
}

impl TryFrom<(Vec<usize>, usize)> for RankList {
    type Error = ProtocolError;

    /// Builds a (possibly partial) rank list over a window of the given size.
    fn try_from((order, window): (Vec<usize>, usize)) -> Result<Self, Self::Error> {
        check_entries(&order, window)?;
        Ok(RankList(order))
    }
}

fn parse_rank_body(body: &str, window: usize) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for piece in body.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            return None;
        }
        for tok in piece.split_whitespace() {
            if !tok.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            out.push(tok.parse::<usize>().ok()?);
        }
    }
    check_entries(&out, window).ok()?;
    Some(out)
}

// ---------------------------------------------------------------------------
// Tool calls

/// Normalised rectangle `(x0, y0, x1, y1)`, serialised as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x0)
            && unit(self.y0)
            && unit(self.x1)
            && unit(self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [f64; 4]) -> Self {
        BBox { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    SelectImage,
    ZoomIn,
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolKind::SelectImage => "select_image",
            ToolKind::ZoomIn => "zoom_in",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ToolCall {
    #[serde(alias = "select-image", alias = "SELECT-IMAGE")]
    SelectImage {
        #[serde(alias = "select_indices")]
        indices: Vec<usize>,
    },
    #[serde(alias = "zoom-in", alias = "ZOOM-IN")]
    ZoomIn {
        #[serde(alias = "zoom_target")]
        target: usize,
        bbox: BBox,
    },
}

impl ToolCall {
    pub fn kind(&self) -> ToolKind {
        match self {
            ToolCall::SelectImage { .. } => ToolKind::SelectImage,
            ToolCall::ZoomIn { .. } => ToolKind::ZoomIn,
        }
    }

    /// Structural validity. Range checks against the window happen at execution.
    pub fn is_well_formed(&self) -> bool {
        match self {
            ToolCall::SelectImage { indices } => {
                let distinct: BTreeSet<_> = indices.iter().collect();
                !indices.is_empty() && distinct.len() == indices.len() && !indices.contains(&0)
            }
            ToolCall::ZoomIn { target, bbox } => *target >= 1 && bbox.is_valid(),
        }
    }

    fn parse(body: &str) -> Option<Self> {
        serde_json::from_str::<ToolCall>(body.trim())
            .ok()
            .filter(ToolCall::is_well_formed)
    }
}

// ---------------------------------------------------------------------------
// Turns

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedTurn {
    pub reasoning: Option<String>,
    pub tool_call: Option<ToolCall>,
    pub answer: Option<RankList>,
    pub tag_valid: bool,
    pub list_valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    ToolCall,
    Answer,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    tag: Tag,
    close: bool,
    start: usize,
    end: usize,
}

const TAGS: [(&str, Tag, bool); 6] = [
    ("<think>", Tag::Think, false),
    ("</think>", Tag::Think, true),
    ("<tool_call>", Tag::ToolCall, false),
    ("</tool_call>", Tag::ToolCall, true),
    ("<answer>", Tag::Answer, false),
    ("</answer>", Tag::Answer, true),
];

fn tokenize(raw: &str) -> Vec<Token> {
    let bytes = raw.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(&(lit, tag, close)) = TAGS
                .iter()
                .find(|(lit, _, _)| bytes[i..].starts_with(lit.as_bytes()))
            {
                out.push(Token {
                    tag,
                    close,
                    start: i,
                    end: i + lit.len(),
                });
                i += lit.len();
                continue;
            }
        }
        i += 1;
    }
    out
}

/// First `<tag>` … following `</tag>` pair, as the body slice.
fn segment<'a>(raw: &'a str, tokens: &[Token], tag: Tag) -> Option<&'a str> {
    let open = tokens.iter().position(|t| t.tag == tag && !t.close)?;
    let close = tokens[open + 1..]
        .iter()
        .find(|t| t.tag == tag && t.close)?;
    Some(&raw[tokens[open].end..close.start])
}

fn blank(s: &str) -> bool {
    s.trim().is_empty()
}

fn strictly_tagged(raw: &str, tokens: &[Token]) -> bool {
    let [t0, t1, t2, t3] = match tokens {
        [a, b, c, d] => [a, b, c, d],
        _ => return false,
    };
    t0.tag == Tag::Think
        && !t0.close
        && t1.tag == Tag::Think
        && t1.close
        && matches!(t2.tag, Tag::ToolCall | Tag::Answer)
        && !t2.close
        && t3.tag == t2.tag
        && t3.close
        && blank(&raw[..t0.start])
        && blank(&raw[t1.end..t2.start])
        && blank(&raw[t3.end..])
}

/// Parses one complete model turn. Never fails.
///
/// `tag_valid` holds iff the turn is exactly one think segment followed by
/// exactly one tool-call-or-answer segment. `list_valid` holds iff an answer
/// segment exists whose body is a non-empty list of distinct integers in
/// `1..=window_size`. If a tool-call segment is present the answer is not
/// extracted.
pub fn parse_turn(raw: &str, window_size: usize) -> ParsedTurn {
    let tokens = tokenize(raw);
    let reasoning = segment(raw, &tokens, Tag::Think).map(str::to_owned);
    let tool_body = segment(raw, &tokens, Tag::ToolCall);
    let answer_body = segment(raw, &tokens, Tag::Answer);
    let parsed_list = answer_body.and_then(|b| parse_rank_body(b, window_size));
    let list_valid = parsed_list.is_some();
    let tool_call = tool_body.and_then(ToolCall::parse);
    let answer = if tool_body.is_some() {
        None
    } else {
        parsed_list.map(RankList)
    };
    ParsedTurn {
        reasoning,
        tool_call,
        answer,
        tag_valid: strictly_tagged(raw, &tokens),
        list_valid,
    }
}

/// Serialises a turn back into the tagged language.
pub fn render_turn(turn: &ParsedTurn) -> String {
    let mut out = String::new();
    if let Some(r) = &turn.reasoning {
        out.push_str("<think>");
        out.push_str(r);
        out.push_str("</think>");
    }
    if let Some(call) = &turn.tool_call {
        out.push_str("<tool_call>");
        out.push_str(&serde_json::to_string(call).expect("tool call serialises"));
        out.push_str("</tool_call>");
    } else if let Some(a) = &turn.answer {
        out.push_str("<answer>");
        out.push_str(&a.to_string());
        out.push_str("</answer>");
    }
    out
}

// ---------------------------------------------------------------------------
// Messages

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Bytes { data: Arc<[u8]>, mime: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlot {
    pub label: String,
    pub source: ImageSource,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    Image(ImageSlot),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Message {
            role,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn image_count(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| matches!(p, ContentPart::Image(_)))
            .count()
    }

    fn push_text(&mut self, s: &str) {
        if s.is_empty() {
            return;
        }
        if let Some(ContentPart::Text(last)) = self.parts.last_mut() {
            last.push_str(s);
        } else {
            self.parts.push(ContentPart::Text(s.to_owned()));
        }
    }
}

/// The conversation presented to the policy, plus the episode identity it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageSequence {
    pub query_id: String,
    pub window_ids: Vec<String>,
    pub messages: Vec<Message>,
}

impl MessageSequence {
    /// Number of assistant turns so far; backends use it as the turn index.
    pub fn assistant_turns(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count()
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(Message::image_count).sum()
    }
}

// ---------------------------------------------------------------------------
// Templates

const DEFAULT_SYSTEM: &str = include_str!("../templates/system.txt");
const DEFAULT_USER: &str = include_str!("../templates/user.txt");

const PLACEHOLDERS: [&str; 3] = ["query_text", "num_candidates", "candidates"];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: DEFAULT_SYSTEM.to_owned(),
            user: DEFAULT_USER.to_owned(),
        }
    }
}

#[derive(Debug, PartialEq)]
enum Piece<'a> {
    Lit(String),
    Slot(&'a str),
}

/// Splits `{name}` placeholders out of a template; `{{` and `}}` escape braces.
fn split_template(t: &str) -> Result<Vec<Piece<'_>>, ProtocolError> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut rest = t;
    while let Some(i) = rest.find(['{', '}']) {
        lit.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            lit.push_str(&tail[..1]);
            rest = &tail[2..];
        } else if let Some(stripped) = tail.strip_prefix('{') {
            let end = stripped
                .find('}')
                .ok_or_else(|| ProtocolError::UnresolvedPlaceholder(stripped.to_owned()))?;
            let name = &stripped[..end];
            if !PLACEHOLDERS.contains(&name) {
                return Err(ProtocolError::UnresolvedPlaceholder(name.to_owned()));
            }
            if !lit.is_empty() {
                out.push(Piece::Lit(std::mem::take(&mut lit)));
            }
            out.push(Piece::Slot(name));
            rest = &stripped[end + 1..];
        } else {
            // Lone closing brace.
            lit.push('}');
            rest = &tail[1..];
        }
    }
    lit.push_str(rest);
    if !lit.is_empty() {
        out.push(Piece::Lit(lit));
    }
    Ok(out)
}

impl PromptTemplate {
    pub fn load(system: &std::path::Path, user: &std::path::Path) -> std::io::Result<Self> {
        Ok(PromptTemplate {
            system: std::fs::read_to_string(system)?,
            user: std::fs::read_to_string(user)?,
        })
    }

    /// Checks that every placeholder is known and each one is bound somewhere.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let sys = split_template(&self.system)?;
        let user = split_template(&self.user)?;
        for required in PLACEHOLDERS {
            let in_user = user.contains(&Piece::Slot(required));
            let in_sys = sys.contains(&Piece::Slot(required));
            // Query and candidate blocks carry images, so they belong in the user turn.
            let ok = match required {
                "num_candidates" => in_user || in_sys,
                _ => in_user,
            };
            if !ok {
                return Err(ProtocolError::UnresolvedPlaceholder(required.to_owned()));
            }
        }
        if sys.iter().any(|p| matches!(p, Piece::Slot("query_text" | "candidates"))) {
            return Err(ProtocolError::UnresolvedPlaceholder(
                "query_text/candidates in system template".into(),
            ));
        }
        Ok(())
    }
}

fn image_slot(label: String, path: &str) -> ContentPart {
    ContentPart::Image(ImageSlot {
        label,
        source: ImageSource::File(PathBuf::from(path)),
    })
}

/// Renders the opening system and user messages for one window.
///
/// Candidates are numbered from 1 in window order; each image becomes an
/// attachment slot whose path is resolved by the backend.
pub fn render_prompt(
    query: &Query,
    window: &[Candidate],
    template: &PromptTemplate,
) -> Result<MessageSequence, ProtocolError> {
    if window.is_empty() {
        return Err(ProtocolError::EmptyWindow);
    }
    template.validate()?;
    if query.modality.has_image() && query.image_refs.is_empty() {
        return Err(ProtocolError::MissingImage(format!("query {}", query.id)));
    }
    for (i, c) in window.iter().enumerate() {
        if c.modality.has_image() && c.image_ref.as_deref().is_none_or(str::is_empty) {
            return Err(ProtocolError::MissingImage(format!(
                "candidate {} ({})",
                i + 1,
                c.id
            )));
        }
    }
    let num = window.len().to_string();

    let mut system = Message {
        role: Role::System,
        parts: Vec::new(),
    };
    for piece in split_template(&template.system)? {
        match piece {
            Piece::Lit(s) => system.push_text(&s),
            Piece::Slot(_) => system.push_text(&num),
        }
    }

    let mut user = Message {
        role: Role::User,
        parts: Vec::new(),
    };
    for piece in split_template(&template.user)? {
        match piece {
            Piece::Lit(s) => user.push_text(&s),
            Piece::Slot("num_candidates") => user.push_text(&num),
            Piece::Slot("query_text") => {
                user.push_text(query.text.as_deref().unwrap_or(""));
                for (i, r) in query.image_refs.iter().enumerate() {
                    user.parts.push(image_slot(format!("query image {}", i + 1), r));
                }
            }
            Piece::Slot(_) => {
                for (i, c) in window.iter().enumerate() {
                    if i > 0 {
                        user.push_text("\n");
                    }
                    user.push_text(&format!("[{}]", i + 1));
                    if let Some(t) = c.text.as_deref().filter(|t| !t.is_empty()) {
                        user.push_text(" ");
                        user.push_text(t);
                    }
                    if let Some(r) = &c.image_ref {
                        user.push_text(" ");
                        user.parts.push(image_slot((i + 1).to_string(), r));
                    }
                }
            }
        }
    }

    Ok(MessageSequence {
        query_id: query.id.clone(),
        window_ids: window.iter().map(|c| c.id.clone()).collect(),
        messages: vec![system, user],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Modality;

    #[test]
    fn well_formed_answer_turn() {
        let t = parse_turn("<think>compare logos</think><answer>3,1,2</answer>", 3);
        assert_eq!(t.reasoning.as_deref(), Some("compare logos"));
        assert_eq!(t.answer.as_ref().unwrap().as_slice(), &[3, 1, 2]);
        assert!(t.tag_valid);
        assert!(t.list_valid);
        assert!(t.tool_call.is_none());
    }

    #[test]
    fn tool_turn_has_no_list() {
        let raw = r#"<think>x</think><tool_call>{"tool":"zoom_in","target":2,"bbox":[0.1,0.1,0.5,0.5]}</tool_call>"#;
        let t = parse_turn(raw, 3);
        assert_eq!(
            t.tool_call,
            Some(ToolCall::ZoomIn {
                target: 2,
                bbox: BBox::new(0.1, 0.1, 0.5, 0.5)
            })
        );
        assert!(t.tag_valid);
        assert!(!t.list_valid);
        assert!(t.answer.is_none());
    }

    #[test]
    fn duplicate_entry_is_list_invalid() {
        let t = parse_turn("<answer>1,1,2</answer>", 3);
        assert!(!t.list_valid);
        assert!(t.answer.is_none());
        assert!(!t.tag_valid);
    }

    #[test]
    fn separators_and_whitespace() {
        for body in ["3 1 2", " 3, 1 ,2 ", "3,\n1\t2", "3 ,1, 2"] {
            let t = parse_turn(&format!("<think>t</think>\n<answer>{body}</answer>\n"), 3);
            assert!(t.list_valid, "{body:?}");
            assert!(t.tag_valid, "{body:?}");
            assert_eq!(t.answer.unwrap().as_slice(), &[3, 1, 2]);
        }
        for body in ["", "3,,1", "3,1,", "[3,1,2]", "3,1,4", "0,1", "-1", "2.0"] {
            let t = parse_turn(&format!("<think>t</think><answer>{body}</answer>"), 3);
            assert!(!t.list_valid, "{body:?}");
        }
    }

    #[test]
    fn partial_list_is_list_valid() {
        let t = parse_turn("<think>t</think><answer>2</answer>", 5);
        assert!(t.list_valid);
        assert_eq!(t.answer.unwrap().as_slice(), &[2]);
    }

    #[test]
    fn strict_tag_grammar() {
        let bad = [
            "stray <think>t</think><answer>1</answer>",
            "<think>t</think>stray<answer>1</answer>",
            "<think>t</think><answer>1</answer> stray",
            "<answer>1</answer><think>t</think>",
            "<think>t</think>",
            "<think><think>t</think></think><answer>1</answer>",
            "<think>t</think><answer>1</answer><answer>1</answer>",
            "<think>t</think><tool_call>{}</tool_call><answer>1</answer>",
            "<think>t<answer>1</answer>",
        ];
        for raw in bad {
            assert!(!parse_turn(raw, 3).tag_valid, "{raw}");
        }
    }

    #[test]
    fn tool_call_and_answer_keeps_only_tool() {
        let raw = r#"<think>t</think><tool_call>{"tool":"select_image","indices":[1]}</tool_call><answer>1</answer>"#;
        let t = parse_turn(raw, 3);
        assert!(t.tool_call.is_some());
        assert!(t.answer.is_none());
        assert!(!t.tag_valid);
        assert!(t.list_valid);
    }

    #[test]
    fn malformed_tool_calls() {
        for body in [
            "not json",
            r#"{"tool":"select_image","indices":[]}"#,
            r#"{"tool":"select_image","indices":[1,1]}"#,
            r#"{"tool":"zoom_in","target":1,"bbox":[0.5,0.5,0.5,0.9]}"#,
            r#"{"tool":"zoom_in","target":0,"bbox":[0,0,1,1]}"#,
            r#"{"tool":"zoom_in","target":1,"bbox":[0,0,1.5,1]}"#,
            r#"{"tool":"ocr","target":1}"#,
        ] {
            let t = parse_turn(&format!("<think>t</think><tool_call>{body}</tool_call>"), 3);
            assert!(t.tool_call.is_none(), "{body}");
            assert!(t.tag_valid);
        }
        let t = parse_turn(
            r#"<think>t</think><tool_call>{"tool":"SELECT-IMAGE","select_indices":[3,1]}</tool_call>"#,
            3,
        );
        assert_eq!(
            t.tool_call,
            Some(ToolCall::SelectImage {
                indices: vec![3, 1]
            })
        );
    }

    #[test]
    fn render_then_parse_is_identity() {
        let raw = r#"<think>a b</think><tool_call>{"tool":"zoom_in","target":3,"bbox":[0.1,0.2,0.30000000000000004,0.9]}</tool_call>"#;
        let t = parse_turn(raw, 4);
        assert_eq!(parse_turn(&render_turn(&t), 4), t);
        let t = parse_turn("<think>z</think><answer>4 2</answer>", 4);
        assert_eq!(parse_turn(&render_turn(&t), 4), t);
    }

    #[test]
    fn normalize_fill_in() {
        assert_eq!(normalize_ranklist(&[3, 1], 4).unwrap().as_slice(), &[3, 1, 2, 4]);
        assert_eq!(normalize_ranklist(&[1, 2, 3], 3).unwrap().as_slice(), &[1, 2, 3]);
        assert_eq!(
            normalize_ranklist(&[5], 4),
            Err(ProtocolError::OutOfRange {
                value: 5,
                window: 4
            })
        );
        assert_eq!(
            normalize_ranklist(&[2, 2], 4),
            Err(ProtocolError::Duplicate(2))
        );
    }

    fn image_cand(id: &str) -> Candidate {
        Candidate::image(id, format!("{id}.png"))
    }

    #[test]
    fn text_query_two_image_candidates() {
        let q = Query::text("q", "a red bag");
        let seq =
            render_prompt(&q, &[image_cand("a"), image_cand("b")], &PromptTemplate::default())
                .unwrap();
        assert_eq!(seq.messages.len(), 2);
        assert_eq!(seq.messages[0].role, Role::System);
        let user = &seq.messages[1];
        let labels: Vec<_> = user
            .parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Image(s) => Some(s.label.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(labels, ["1", "2"]);
        assert_eq!(seq.window_ids, ["a", "b"]);
    }

    #[test]
    fn interleaved_query_counts_images() {
        let mut q = Query::text("q", "like this but blue");
        q.modality = Modality::TextImage;
        q.image_refs = vec!["q.png".into()];
        let window = [image_cand("a"), image_cand("b"), image_cand("c")];
        let seq = render_prompt(&q, &window, &PromptTemplate::default()).unwrap();
        assert_eq!(seq.image_count(), 4);
    }

    #[test]
    fn template_placeholder_errors() {
        let q = Query::text("q", "x");
        let window = [Candidate::text("a", "doc")];
        let mut t = PromptTemplate {
            user: "Candidates ({num_candidates}):\n{candidates}".into(),
            ..Default::default()
        };
        assert_eq!(
            render_prompt(&q, &window, &t),
            Err(ProtocolError::UnresolvedPlaceholder("query_text".into()))
        );
        t.user = "{query_text} {candidates} {num_candidates} {mystery}".into();
        assert_eq!(
            render_prompt(&q, &window, &t),
            Err(ProtocolError::UnresolvedPlaceholder("mystery".into()))
        );
        t.user = "{{literal}} {query_text} {candidates} {num_candidates}".into();
        let seq = render_prompt(&q, &window, &t).unwrap();
        match &seq.messages[1].parts[0] {
            ContentPart::Text(s) => assert!(s.starts_with("{literal} x [1] doc 1")),
            _ => panic!(),
        }
    }

    #[test]
    fn missing_image_reference() {
        let q = Query::text("q", "x");
        let mut c = image_cand("a");
        c.image_ref = None;
        assert!(matches!(
            render_prompt(&q, &[c], &PromptTemplate::default()),
            Err(ProtocolError::MissingImage(_))
        ));
        assert_eq!(
            render_prompt(&q, &[], &PromptTemplate::default()),
            Err(ProtocolError::EmptyWindow)
        );
    }
}
