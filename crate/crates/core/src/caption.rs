//! Caption language: closed vocabulary, token-ID captions and an
//! error-tolerant parser from captions to scene graphs.
//!
//! Clause grammar (clauses are separated by `AND`):
//!
//! ```text
//! object   := [color] [size] category [AT row col]
//! relation := object relation-word object
//! ```
//!
//! Tokens that do not fit a clause are skipped, so every token sequence
//! parses to some graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::world::{Category, Color, RelationKind, Scene, Size};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const AT: u32 = 3;
pub const AND: u32 = 4;

/// Longest caption the type admits, BOS and EOS included. Large enough for the
/// canonical caption of a five-object, four-relation scene (at most 76 tokens).
pub const MAX_LEN: usize = 80;

const STRUCTURAL: [&str; 5] = ["BOS", "EOS", "PAD", "AT", "AND"];

/// Syntactic class of a token ID.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Bos,
    Eos,
    Pad,
    At,
    And,
    Category(Category),
    Color(Color),
    Size(Size),
    Relation(RelationKind),
    Row(usize),
    Col(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    grid: usize,
    tokens: Vec<String>,
    kinds: Vec<Token>,
    id_of: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(grid: usize) -> Vocab {
        let mut entries: Vec<(String, Token)> = vec![
            ("BOS".into(), Token::Bos),
            ("EOS".into(), Token::Eos),
            ("PAD".into(), Token::Pad),
            ("AT".into(), Token::At),
            ("AND".into(), Token::And),
        ];
        debug_assert!(entries.iter().zip(STRUCTURAL).all(|(e, s)| e.0 == s));
        entries.extend(Category::ALL.map(|c| (c.name().to_string(), Token::Category(c))));
        entries.extend(Color::PALETTE.map(|c| (c.name().to_string(), Token::Color(c))));
        entries.extend(Size::ALL.map(|s| (s.name().to_string(), Token::Size(s))));
        entries.extend(RelationKind::ALL.map(|r| (r.name().to_string(), Token::Relation(r))));
        entries.extend((0..grid).map(|r| (format!("r{r}"), Token::Row(r))));
        entries.extend((0..grid).map(|c| (format!("c{c}"), Token::Col(c))));

        let id_of = entries
            .iter()
            .enumerate()
            .map(|(i, (w, _))| (w.clone(), i as u32))
            .collect();
        let (tokens, kinds) = entries.into_iter().unzip();
        Vocab {
            grid,
            tokens,
            kinds,
            id_of,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.id_of.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn kind(&self, id: u32) -> Token {
        self.kinds[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn id_of_token(&self, token: Token) -> u32 {
        self.kinds
            .iter()
            .position(|&k| k == token)
            .expect("token is in the vocabulary") as u32
    }

    /// `vocab.txt` contents: one token per line, line number = ID.
    pub fn dump(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

/// A token-ID caption: starts with BOS, holds at most one EOS and nothing but PAD after it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    ids: Vec<u32>,
}

impl Caption {
    pub fn new(ids: Vec<u32>, vocab: &Vocab) -> Result<Caption> {
        let bad = |m: String| Err(Error::Caption(m));
        if ids.first() != Some(&BOS) {
            return bad("caption must begin with BOS".into());
        }
        if ids.len() > MAX_LEN {
            return bad(format!(
                "caption has {} tokens, limit is {MAX_LEN}",
                ids.len()
            ));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab.len()) {
            return bad(format!(
                "token id {id} outside vocabulary of {}",
                vocab.len()
            ));
        }
        if let Some(eos) = ids.iter().position(|&id| id == EOS) {
            if ids[eos + 1..].iter().any(|&id| id != PAD) {
                return bad("only PAD may follow EOS".into());
            }
        }
        Ok(Caption { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Tokens emitted after BOS, through EOS when present. These are the
    /// positions the policy scores.
    pub fn generated(&self) -> &[u32] {
        let end = self
            .ids
            .iter()
            .position(|&id| id == EOS)
            .map_or(self.ids.len(), |p| p + 1);
        &self.ids[1..end]
    }

    /// Tokens strictly between BOS and EOS.
    pub fn body(&self) -> &[u32] {
        let g = self.generated();
        match g.last() {
            Some(&EOS) => &g[..g.len() - 1],
            _ => g,
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Caption> {
    let ids = text
        .split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            vocab.id(w).ok_or_else(|| Error::Lexical {
                word: w.to_string(),
                position: i + 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Caption::new(ids, vocab)
}

/// Like [`tokenize`], but adds BOS and EOS when the text omits them.
pub fn caption_from_text(text: &str, vocab: &Vocab) -> Result<Caption> {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    if words.first() != Some(&"BOS") {
        words.insert(0, "BOS");
    }
    if !words.contains(&"EOS") {
        words.push("EOS");
    }
    tokenize(&words.join(" "), vocab)
}

pub fn detokenize(caption: &Caption, vocab: &Vocab) -> String {
    caption
        .ids
        .iter()
        .map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GraphObject {
    pub category: Category,
    pub color: Option<Color>,
    pub size: Option<Size>,
    pub cell: Option<(usize, usize)>,
}

impl GraphObject {
    /// Attributes with omitted ones replaced by the renderer's defaults
    /// (white, small, centre cell).
    pub fn resolved(&self, grid: usize) -> (Color, Size, (usize, usize)) {
        (
            self.color.unwrap_or(Color::White),
            self.size.unwrap_or(Size::Small),
            self.cell.unwrap_or((grid / 2, grid / 2)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GraphRelation {
    pub subject: usize,
    pub relation: RelationKind,
    pub object: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    pub objects: Vec<GraphObject>,
    pub relations: Vec<GraphRelation>,
}

fn parse_ref(toks: &[Token], start: usize) -> Option<(GraphObject, usize)> {
    let mut i = start;
    let mut color = None;
    let mut size = None;
    if let Some(Token::Color(c)) = toks.get(i) {
        color = Some(*c);
        i += 1;
    }
    if let Some(Token::Size(s)) = toks.get(i) {
        size = Some(*s);
        i += 1;
    }
    let Some(Token::Category(category)) = toks.get(i) else {
        return None;
    };
    i += 1;
    let mut cell = None;
    if let (Some(Token::At), Some(Token::Row(r)), Some(Token::Col(c))) =
        (toks.get(i), toks.get(i + 1), toks.get(i + 2))
    {
        cell = Some((*r, *c));
        i += 3;
    }
    Some((
        GraphObject {
            category: *category,
            color,
            size,
            cell,
        },
        i,
    ))
}

fn ref_matches(r: &GraphObject, o: &GraphObject) -> bool {
    r.category == o.category
        && r.color.is_none_or(|c| o.color == Some(c))
        && r.size.is_none_or(|s| o.size == Some(s))
        && r.cell.is_none_or(|p| o.cell == Some(p))
}

/// Parse a caption into a scene graph. Total: never fails on a valid caption.
///
/// Object clauses are listed in order of appearance with exact duplicates
/// removed. Relation endpoints resolve to the first declared object that
/// agrees with every attribute the reference states; unresolvable or
/// reflexive relations are dropped.
pub fn parse_caption(caption: &Caption, vocab: &Vocab) -> SceneGraph {
    let toks: Vec<Token> = caption.body().iter().map(|&id| vocab.kind(id)).collect();
    let mut graph = SceneGraph::default();
    let mut pending = Vec::new();

    for clause in toks.split(|t| *t == Token::And) {
        let mut i = 0;
        while i < clause.len() {
            let Some((first, next)) = parse_ref(clause, i) else {
                i += 1;
                continue;
            };
            if let Some(Token::Relation(kind)) = clause.get(next) {
                if let Some((second, after)) = parse_ref(clause, next + 1) {
                    pending.push((first, *kind, second));
                    i = after;
                    continue;
                }
            }
            if !graph.objects.contains(&first) {
                graph.objects.push(first);
            }
            i = next;
        }
    }

    for (subject, relation, object) in pending {
        let find = |r: &GraphObject| graph.objects.iter().position(|o| ref_matches(r, o));
        if let (Some(s), Some(o)) = (find(&subject), find(&object)) {
            let rel = GraphRelation {
                subject: s,
                relation,
                object: o,
            };
            if s != o && !graph.relations.contains(&rel) {
                graph.relations.push(rel);
            }
        }
    }
    graph
}

/// Shortest reference that picks out object `index` uniquely among `scene`'s objects.
fn minimal_ref(scene: &Scene, index: usize) -> GraphObject {
    let o = &scene.objects[index];
    let full = GraphObject {
        category: o.category,
        color: Some(o.color),
        size: Some(o.size),
        cell: Some((o.row, o.col)),
    };
    let candidates = [
        GraphObject {
            color: None,
            size: None,
            cell: None,
            ..full
        },
        GraphObject {
            size: None,
            cell: None,
            ..full
        },
        GraphObject {
            color: None,
            cell: None,
            ..full
        },
        GraphObject { cell: None, ..full },
        GraphObject {
            color: None,
            size: None,
            ..full
        },
    ];
    let objects: Vec<GraphObject> = crate::world::ground_truth_graph(scene).objects;
    candidates
        .into_iter()
        .find(|r| objects.iter().filter(|o| ref_matches(r, o)).count() == 1)
        .expect("cells are unique, so the positional reference always resolves")
}

fn push_ref(out: &mut Vec<u32>, r: &GraphObject, vocab: &Vocab) {
    if let Some(c) = r.color {
        out.push(vocab.id_of_token(Token::Color(c)));
    }
    if let Some(s) = r.size {
        out.push(vocab.id_of_token(Token::Size(s)));
    }
    out.push(vocab.id_of_token(Token::Category(r.category)));
    if let Some((row, col)) = r.cell {
        out.push(AT);
        out.push(vocab.id_of_token(Token::Row(row)));
        out.push(vocab.id_of_token(Token::Col(col)));
    }
}

/// The caption that enumerates every object (fully attributed) and then every
/// relation of `scene`, in storage order.
pub fn canonical_caption(scene: &Scene, vocab: &Vocab) -> Result<Caption> {
    let mut ids = vec![BOS];
    let mut clauses = 0;
    for o in &scene.objects {
        if clauses > 0 {
            ids.push(AND);
        }
        clauses += 1;
        let full = GraphObject {
            category: o.category,
            color: Some(o.color),
            size: Some(o.size),
            cell: Some((o.row, o.col)),
        };
        push_ref(&mut ids, &full, vocab);
    }
    for r in &scene.relations {
        if clauses > 0 {
            ids.push(AND);
        }
        clauses += 1;
        push_ref(&mut ids, &minimal_ref(scene, r.subject), vocab);
        ids.push(vocab.id_of_token(Token::Relation(r.relation)));
        push_ref(&mut ids, &minimal_ref(scene, r.object), vocab);
    }
    ids.push(EOS);
    Caption::new(ids, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{ground_truth_graph, sample_scene, WorldConfig};
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(8)
    }

    #[test]
    fn vocabulary_layout() {
        let v = vocab();
        assert_eq!(v.len(), 36);
        assert_eq!(v.id("BOS"), Some(0));
        assert_eq!(v.id("EOS"), Some(1));
        assert_eq!(v.id("PAD"), Some(2));
        assert_eq!(Vocab::new(4).len(), 4 + 5 + 2 + 4 + 2 * 4 + 5);
        for (i, w) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(w), Some(i as u32));
        }
    }

    #[test]
    fn tokenize_round_trip() {
        let v = vocab();
        let text = "BOS red small circle AT r2 c3 EOS";
        let c = tokenize(text, &v).unwrap();
        assert_eq!(detokenize(&c, &v), text);
        assert_eq!(
            detokenize(&tokenize("  BOS   red  EOS ", &v).unwrap(), &v),
            "BOS red EOS"
        );
        assert_eq!(tokenize("BOS EOS", &v).unwrap().ids(), &[0, 1]);
    }

    #[test]
    fn lexical_error_names_word_and_position() {
        match tokenize("BOS zebra EOS", &vocab()) {
            Err(Error::Lexical { word, position }) => {
                assert_eq!(word, "zebra");
                assert_eq!(position, 2);
            }
            other => panic!("expected lexical error, got {other:?}"),
        }
    }

    #[test]
    fn caption_invariants() {
        let v = vocab();
        assert!(Caption::new(vec![], &v).is_err());
        assert!(Caption::new(vec![EOS], &v).is_err());
        assert!(Caption::new(vec![BOS, EOS, AT], &v).is_err());
        assert!(Caption::new(vec![BOS, EOS, EOS], &v).is_err());
        assert!(Caption::new(vec![BOS, 99], &v).is_err());
        assert!(Caption::new(vec![BOS, EOS, PAD, PAD], &v).is_ok());
        assert!(Caption::new(vec![BOS; MAX_LEN + 1], &v).is_err());
        let c = Caption::new(vec![BOS, AT, EOS, PAD], &v).unwrap();
        assert_eq!(c.generated(), &[AT, EOS]);
        assert_eq!(c.body(), &[AT]);
    }

    fn parse(text: &str) -> SceneGraph {
        let v = vocab();
        parse_caption(&caption_from_text(text, &v).unwrap(), &v)
    }

    #[test]
    fn fully_attributed_object() {
        let g = parse("red small circle AT r2 c3");
        assert_eq!(
            g.objects,
            vec![GraphObject {
                category: Category::Circle,
                color: Some(Color::Red),
                size: Some(Size::Small),
                cell: Some((2, 3)),
            }]
        );
        assert!(g.relations.is_empty());
    }

    #[test]
    fn empty_caption() {
        assert_eq!(parse("BOS EOS"), SceneGraph::default());
    }

    #[test]
    fn dangling_attribute_does_not_bind_across_and() {
        let g = parse("blue AND AND square");
        assert_eq!(
            g.objects,
            vec![GraphObject {
                category: Category::Square,
                color: None,
                size: None,
                cell: None,
            }]
        );
    }

    #[test]
    fn junk_is_skipped() {
        let g = parse("AT r1 large AT green star AT r1 c2 c2 left_of");
        assert_eq!(g.objects.len(), 1);
        assert_eq!(g.objects[0].color, Some(Color::Green));
        assert_eq!(g.objects[0].size, None);
        assert_eq!(g.objects[0].cell, Some((1, 2)));
    }

    #[test]
    fn relation_resolution() {
        let g = parse("red circle AT r1 c1 AND blue square AT r1 c4 AND circle left_of square");
        assert_eq!(g.objects.len(), 2);
        assert_eq!(
            g.relations,
            vec![GraphRelation {
                subject: 0,
                relation: RelationKind::LeftOf,
                object: 1
            }]
        );
        // Unresolved endpoint drops the relation.
        let g = parse("red circle AND circle above star");
        assert_eq!(g.objects.len(), 1);
        assert!(g.relations.is_empty());
        // Relation word without a second reference: the first becomes an object.
        let g = parse("circle above AND square");
        assert_eq!(g.objects.len(), 2);
        assert!(g.relations.is_empty());
    }

    #[test]
    fn duplicate_clauses_collapse() {
        let once = parse("red circle AT r1 c1 AND star AND circle below star");
        let thrice = parse(
            "red circle AT r1 c1 AND star AND red circle AT r1 c1 AND circle below star AND star AND circle below star",
        );
        assert_eq!(once, thrice);
    }

    #[test]
    fn canonical_caption_inverts_ground_truth() {
        let v = vocab();
        let cfg = WorldConfig::default();
        for seed in 0..3_000 {
            let scene = sample_scene(seed, &cfg).unwrap();
            let cap = canonical_caption(&scene, &v).unwrap();
            assert_eq!(
                parse_caption(&cap, &v),
                ground_truth_graph(&scene),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn vocab_dump_lines() {
        let d = vocab().dump();
        assert_eq!(d.lines().count(), 36);
        assert_eq!(d.lines().nth(3), Some("AT"));
        assert_eq!(d.lines().last(), Some("c7"));
    }

    proptest! {
        #[test]
        fn parser_is_total(body in proptest::collection::vec(0u32..36, 0..(MAX_LEN - 2))) {
            let v = vocab();
            let ids: Vec<u32> = std::iter::once(BOS)
                .chain(body.into_iter().filter(|&t| t != EOS))
                .chain(std::iter::once(EOS))
                .collect();
            let cap = Caption::new(ids, &v).unwrap();
            let g = parse_caption(&cap, &v);
            for r in &g.relations {
                prop_assert!(r.subject < g.objects.len() && r.object < g.objects.len());
                prop_assert!(r.subject != r.object);
            }
        }
    }
}
