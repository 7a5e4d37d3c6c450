//! Containment (covering) index over subscriptions.
//!
//! Distinct canonical subscriptions are the nodes of a DAG whose edges form
//! the Hasse diagram of the covering order: `p -> c` means `p` covers `c` and
//! nothing stored lies strictly between them. Matching walks down from the
//! roots and never descends below a node the header fails, since anything a
//! failing node covers must fail too.
//!
//! Constraints are compiled against interned attribute and text ids so the
//! hot paths (root scans during matching and insertion) avoid string work.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::mem::size_of;
use std::sync::Arc;

use indexmap::IndexSet;
use thiserror::Error;

use crate::model::{
    covers, AttributeValue, Bound, ClientId, Constraint, PublicationHeader, SubId, Subscription, Test,
};

// Footprint accounting: struct sizes of the stored layout plus string heap
// bytes. Allocator slack and hash-table load factor are not charged.

/// Node slot plus its `by_key` entry.
pub const NODE_FIXED_BYTES: usize =
    size_of::<Option<Node>>() + size_of::<(String, NodeId)>();
/// Stored constraint, its compiled form and one posting-list entry.
pub const CONSTRAINT_FIXED_BYTES: usize =
    size_of::<Constraint>() + size_of::<Compiled>() + size_of::<NodeId>();
/// One id in the parent list and one in the child list.
pub const EDGE_BYTES: usize = 2 * size_of::<NodeId>();
/// `by_sub` entry plus the node's client-map entry and its reply address.
pub const ENTRY_FIXED_BYTES: usize =
    size_of::<(SubId, (NodeId, ClientId))>() + size_of::<((ClientId, SubId), Option<Arc<str>>)>();

fn node_bytes(sub: &Subscription, key: &str) -> usize {
    let constraints: usize = sub
        .constraints()
        .iter()
        .map(|c| {
            let text = match c.test() {
                Test::Equals(t) => t.len(),
                Test::Range(_) => 0,
            };
            CONSTRAINT_FIXED_BYTES + c.attr().len() + text
        })
        .sum();
    // The canonical key is held by the node and by the key map.
    NODE_FIXED_BYTES + 2 * key.len() + constraints
}

fn entry_bytes(client: &ClientId, sub: &SubId, reply: &Option<Arc<str>>) -> usize {
    // An Arc allocation carries two reference counts ahead of the text.
    let reply = reply.as_ref().map_or(0, |r| 2 * size_of::<usize>() + r.len());
    ENTRY_FIXED_BYTES + 2 * (client.as_str().len() + sub.as_str().len()) + reply
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IndexError {
    #[error("subscription id {0} is already registered")]
    Duplicate(SubId),
    #[error("subscription must be canonical")]
    NotCanonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IndexStats {
    pub node_count: usize,
    pub root_count: usize,
    pub max_depth: usize,
    pub footprint_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditViolation {
    /// Edge whose parent does not cover the child.
    EdgeNotCovering(NodeId, NodeId),
    /// Edge implied by a longer path.
    TransitiveEdge(NodeId, NodeId),
    /// `a` covers `b` but `b` is not reachable from `a`.
    MissingOrder(NodeId, NodeId),
    /// Parent and child lists disagree about an edge.
    AsymmetricEdge(NodeId, NodeId),
    /// Node with no parents missing from the root set, or vice versa.
    RootMismatch(NodeId),
    /// Two nodes share one canonical form.
    DuplicateNode(NodeId, NodeId),
}

#[derive(Debug, Clone, Copy)]
enum CompiledTest {
    /// Unbounded ends are stored as infinities with inclusive flags.
    Range {
        lo: f64,
        lo_strict: bool,
        hi: f64,
        hi_strict: bool,
    },
    Text(u32),
}

#[derive(Debug, Clone, Copy)]
struct Compiled {
    attr: u32,
    test: CompiledTest,
}

impl CompiledTest {
    #[inline]
    fn eval(&self, slot: Slot) -> bool {
        match (*self, slot) {
            (
                CompiledTest::Range {
                    lo,
                    lo_strict,
                    hi,
                    hi_strict,
                },
                Slot::Num(x),
            ) => {
                (if lo_strict { x > lo } else { x >= lo })
                    && (if hi_strict { x < hi } else { x <= hi })
            }
            (CompiledTest::Text(t), Slot::Text(v)) => t == v,
            _ => false,
        }
    }

    fn includes(&self, other: &CompiledTest) -> bool {
        match (*self, *other) {
            (
                CompiledTest::Range {
                    lo: a_lo,
                    lo_strict: a_ls,
                    hi: a_hi,
                    hi_strict: a_hs,
                },
                CompiledTest::Range {
                    lo: b_lo,
                    lo_strict: b_ls,
                    hi: b_hi,
                    hi_strict: b_hs,
                },
            ) => {
                let lo_ok = a_lo < b_lo || (a_lo == b_lo && (!a_ls || b_ls));
                let hi_ok = a_hi > b_hi || (a_hi == b_hi && (!a_hs || b_hs));
                lo_ok && hi_ok
            }
            (CompiledTest::Text(a), CompiledTest::Text(b)) => a == b,
            _ => false,
        }
    }
}

/// Compiled constraints sorted by attribute id. Does `a` cover `b`?
fn covers_compiled(a: &[Compiled], b: &[Compiled]) -> bool {
    if a.len() > b.len() {
        return false;
    }
    let mut j = 0;
    for ca in a {
        while j < b.len() && b[j].attr < ca.attr {
            j += 1;
        }
        if j == b.len() || b[j].attr != ca.attr || !ca.test.includes(&b[j].test) {
            return false;
        }
        j += 1;
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Absent,
    Num(f64),
    /// Text value; `u32::MAX` when no subscription mentions it.
    Text(u32),
}

#[derive(Debug, Default, Clone)]
struct Interner {
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.ids.len() as u32;
        self.ids.insert(s.to_string(), id);
        id
    }

    fn get(&self, s: &str) -> Option<u32> {
        self.ids.get(s).copied()
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum PostingKey {
    Attr(u32),
    TextEq(u32, u32),
}

#[derive(Debug, Clone)]
struct Node {
    sub: Subscription,
    key: String,
    compiled: Box<[Compiled]>,
    /// Entry → reply address, if inserted with one.
    clients: BTreeMap<(ClientId, SubId), Option<Arc<str>>>,
    parents: Vec<NodeId>,
    children: Vec<NodeId>,
}

impl Node {
    /// Text equalities are the most selective tests, so they run first.
    #[inline]
    fn eval(&self, table: &[Slot]) -> bool {
        let test = |c: &Compiled| {
            c.test
                .eval(table.get(c.attr as usize).copied().unwrap_or(Slot::Absent))
        };
        let is_text = |c: &&Compiled| matches!(c.test, CompiledTest::Text(_));
        self.compiled.iter().filter(is_text).all(test)
            && self.compiled.iter().filter(|c| !is_text(c)).all(test)
    }
}

/// Read-only view of one index node.
#[derive(Debug, Clone, Copy)]
pub struct NodeView<'a> {
    node: &'a Node,
}

impl<'a> NodeView<'a> {
    pub fn subscription(&self) -> &'a Subscription {
        &self.node.sub
    }

    pub fn canonical_text(&self) -> &'a str {
        &self.node.key
    }

    pub fn clients(&self) -> impl Iterator<Item = &'a (ClientId, SubId)> {
        self.node.clients.keys()
    }

    pub fn parents(&self) -> &'a [NodeId] {
        &self.node.parents
    }

    pub fn children(&self) -> &'a [NodeId] {
        &self.node.children
    }
}

/// Hasse-diagram index of subscriptions ordered by covering.
///
/// Mutations need `&mut self`; matching takes `&self`, so any number of
/// readers may match concurrently between mutations.
#[derive(Debug, Clone, Default)]
pub struct ContainmentIndex {
    nodes: Vec<Option<Node>>,
    free: Vec<u32>,
    roots: IndexSet<NodeId>,
    by_key: HashMap<String, NodeId>,
    by_sub: HashMap<SubId, (NodeId, ClientId)>,
    postings: HashMap<PostingKey, BTreeSet<NodeId>>,
    attrs: Interner,
    texts: Interner,
    live: usize,
    edges: usize,
    node_bytes: usize,
    entry_bytes: usize,
}

impl ContainmentIndex {
    pub fn new() -> Self {
        Self::default()
    }

    fn node_ref(&self, id: NodeId) -> &Node {
        self.nodes[id.index()].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id.index()].as_mut().expect("live node")
    }

    pub fn node(&self, id: NodeId) -> Option<NodeView<'_>> {
        self.nodes
            .get(id.index())
            .and_then(|n| n.as_ref())
            .map(|node| NodeView { node })
    }

    /// Node holding the subscription with this canonical form, if any.
    pub fn find(&self, s: &Subscription) -> Option<NodeId> {
        self.by_key.get(&s.canonical_text()).copied()
    }

    pub fn node_of(&self, sub_id: &SubId) -> Option<NodeId> {
        self.by_sub.get(sub_id).map(|(n, _)| *n)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_some())
            .map(|(i, _)| NodeId(i as u32))
    }

    /// Roots in insertion order.
    pub fn roots(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.roots.iter().copied()
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.node_ids()
            .flat_map(|p| self.node_ref(p).children.iter().map(move |&c| (p, c)))
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.live
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    /// Number of registered (client, subscription) entries.
    pub fn entry_count(&self) -> usize {
        self.by_sub.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    /// Every stored entry with its subscription, for reference scans.
    pub fn entries(&self) -> impl Iterator<Item = (&Subscription, &ClientId, &SubId)> + '_ {
        self.nodes
            .iter()
            .flatten()
            .flat_map(|n| n.clients.keys().map(move |(c, s)| (&n.sub, c, s)))
    }

    pub fn footprint_bytes(&self) -> usize {
        self.node_bytes + self.entry_bytes + EDGE_BYTES * self.edges
    }

    fn compile(&mut self, s: &Subscription) -> Box<[Compiled]> {
        let mut out: Vec<Compiled> = s
            .constraints()
            .iter()
            .map(|c| {
                let attr = self.attrs.intern(c.attr());
                let test = match c.test() {
                    Test::Equals(t) => CompiledTest::Text(self.texts.intern(t)),
                    Test::Range(iv) => {
                        let (lo, lo_strict) = match iv.lo() {
                            Bound::Unbounded => (f64::NEG_INFINITY, false),
                            Bound::Inclusive(v) => (v, false),
                            Bound::Exclusive(v) => (v, true),
                        };
                        let (hi, hi_strict) = match iv.hi() {
                            Bound::Unbounded => (f64::INFINITY, false),
                            Bound::Inclusive(v) => (v, false),
                            Bound::Exclusive(v) => (v, true),
                        };
                        CompiledTest::Range {
                            lo,
                            lo_strict,
                            hi,
                            hi_strict,
                        }
                    }
                };
                Compiled { attr, test }
            })
            .collect();
        out.sort_by_key(|c| c.attr);
        out.into_boxed_slice()
    }

    fn posting_keys(compiled: &[Compiled]) -> Vec<PostingKey> {
        compiled
            .iter()
            .map(|c| match c.test {
                CompiledTest::Text(t) => PostingKey::TextEq(c.attr, t),
                CompiledTest::Range { .. } => PostingKey::Attr(c.attr),
            })
            .collect()
    }

    fn lookup_table(&self, h: &PublicationHeader) -> Vec<Slot> {
        let mut table = vec![Slot::Absent; self.attrs.len()];
        for (name, value) in h.attrs() {
            if let Some(a) = self.attrs.get(name) {
                table[a as usize] = match value {
                    AttributeValue::Number(x) => Slot::Num(*x),
                    AttributeValue::Text(t) => Slot::Text(self.texts.get(t).unwrap_or(u32::MAX)),
                };
            }
        }
        table
    }

    /// Register `sub_id` for `client` under the canonical subscription `s`.
    pub fn insert(
        &mut self,
        s: &Subscription,
        client: ClientId,
        sub_id: SubId,
    ) -> Result<NodeId, IndexError> {
        self.insert_entry(s, client, sub_id, None)
    }

    /// As [`Self::insert`], storing the reply address with the entry so that
    /// [`Self::match_routes`] needs no side lookup.
    pub fn insert_routed(
        &mut self,
        s: &Subscription,
        client: ClientId,
        sub_id: SubId,
        reply: Arc<str>,
    ) -> Result<NodeId, IndexError> {
        self.insert_entry(s, client, sub_id, Some(reply))
    }

    fn insert_entry(
        &mut self,
        s: &Subscription,
        client: ClientId,
        sub_id: SubId,
        reply: Option<Arc<str>>,
    ) -> Result<NodeId, IndexError> {
        if !s.is_canonical() {
            return Err(IndexError::NotCanonical);
        }
        if self.by_sub.contains_key(&sub_id) {
            return Err(IndexError::Duplicate(sub_id));
        }
        let key = s.canonical_text();
        if let Some(&id) = self.by_key.get(&key) {
            self.entry_bytes += entry_bytes(&client, &sub_id, &reply);
            self.node_mut(id).clients.insert((client.clone(), sub_id.clone()), reply);
            self.by_sub.insert(sub_id, (id, client));
            return Ok(id);
        }

        let compiled = self.compile(s);
        let parents = self.immediate_covers(&compiled);
        let children = self.immediate_covered(&compiled);

        let id = match self.free.pop() {
            Some(i) => NodeId(i),
            None => {
                self.nodes.push(None);
                NodeId(self.nodes.len() as u32 - 1)
            }
        };
        if !children.is_empty() {
            let below: HashSet<NodeId> = children.iter().copied().collect();
            for &p in &parents {
                self.unlink_children(p, &below);
            }
        }
        for key in Self::posting_keys(&compiled) {
            self.postings.entry(key).or_default().insert(id);
        }
        self.node_bytes += node_bytes(s, &key);
        self.by_key.insert(key.clone(), id);
        self.entry_bytes += entry_bytes(&client, &sub_id, &reply);
        let mut clients = BTreeMap::new();
        clients.insert((client.clone(), sub_id.clone()), reply);
        self.nodes[id.index()] = Some(Node {
            sub: s.clone(),
            key,
            compiled,
            clients,
            parents: Vec::new(),
            children: Vec::new(),
        });
        self.live += 1;
        self.by_sub.insert(sub_id, (id, client));

        if parents.is_empty() {
            self.roots.insert(id);
        }
        for &p in &parents {
            self.link(p, id);
        }
        for &c in &children {
            self.roots.shift_remove(&c);
            self.link(id, c);
        }
        Ok(id)
    }

    fn link(&mut self, p: NodeId, c: NodeId) {
        self.node_mut(p).children.push(c);
        self.node_mut(c).parents.push(p);
        self.edges += 1;
    }

    /// Remove every edge from `p` into `set`.
    fn unlink_children(&mut self, p: NodeId, set: &HashSet<NodeId>) {
        let mut dropped = Vec::new();
        self.node_mut(p).children.retain(|c| {
            let hit = set.contains(c);
            if hit {
                dropped.push(*c);
            }
            !hit
        });
        for c in dropped {
            self.node_mut(c).parents.retain(|&q| q != p);
            self.edges -= 1;
        }
    }

    fn unlink(&mut self, p: NodeId, c: NodeId) -> bool {
        let pc = &mut self.node_mut(p).children;
        let Some(pos) = pc.iter().position(|&x| x == c) else {
            return false;
        };
        pc.remove(pos);
        let cp = &mut self.node_mut(c).parents;
        if let Some(pos) = cp.iter().position(|&x| x == p) {
            cp.remove(pos);
        }
        self.edges -= 1;
        true
    }

    /// Lowest stored nodes covering `s`, found top-down from the roots. Every
    /// ancestor of a covering node covers too, so the search only descends
    /// through covering nodes.
    fn immediate_covers(&self, s: &[Compiled]) -> Vec<NodeId> {
        let mut covering: Vec<NodeId> = Vec::new();
        let mut seen = vec![0u64; self.nodes.len().div_ceil(64)];
        let mut mark = |n: NodeId| {
            let (word, bit) = (n.index() / 64, 1u64 << (n.index() % 64));
            let fresh = seen[word] & bit == 0;
            seen[word] |= bit;
            fresh
        };
        let mut stack: Vec<NodeId> = Vec::new();
        for &r in &self.roots {
            if covers_compiled(&self.node_ref(r).compiled, s) {
                mark(r);
                stack.push(r);
            }
        }
        while let Some(n) = stack.pop() {
            covering.push(n);
            for &c in &self.node_ref(n).children {
                if covers_compiled(&self.node_ref(c).compiled, s) && mark(c) {
                    stack.push(c);
                }
            }
        }
        let set: HashSet<NodeId> = covering.iter().copied().collect();
        let mut out: Vec<NodeId> = covering
            .into_iter()
            .filter(|&n| !self.node_ref(n).children.iter().any(|c| set.contains(c)))
            .collect();
        out.sort();
        out
    }

    /// Highest stored nodes covered by `s`. A covered node carries every
    /// attribute of `s` and every text equality of `s`, so the smallest
    /// posting list among those keys holds all candidates.
    fn immediate_covered(&self, s: &[Compiled]) -> Vec<NodeId> {
        let keys = Self::posting_keys(s);
        let empty = BTreeSet::new();
        let candidates: Vec<NodeId> = if keys.is_empty() {
            self.node_ids().collect()
        } else {
            keys.iter()
                .map(|k| self.postings.get(k).unwrap_or(&empty))
                .min_by_key(|p| p.len())
                .unwrap()
                .iter()
                .copied()
                .collect()
        };
        let covered: HashSet<NodeId> = candidates
            .into_iter()
            .filter(|&n| covers_compiled(s, &self.node_ref(n).compiled))
            .collect();
        let mut out: Vec<NodeId> = covered
            .iter()
            .copied()
            .filter(|&n| !self.node_ref(n).parents.iter().any(|p| covered.contains(p)))
            .collect();
        out.sort();
        out
    }

    /// Drop one registration. Returns `false` for an unknown id.
    pub fn remove(&mut self, sub_id: &SubId) -> bool {
        let Some((id, client)) = self.by_sub.remove(sub_id) else {
            return false;
        };
        let node = self.node_mut(id);
        let reply = node.clients.remove(&(client.clone(), sub_id.clone())).expect("by_sub and node agree");
        let empty = node.clients.is_empty();
        self.entry_bytes -= entry_bytes(&client, sub_id, &reply);
        if empty {
            self.splice_out(id);
        }
        true
    }

    fn splice_out(&mut self, id: NodeId) {
        let parents = self.node_ref(id).parents.clone();
        let children = self.node_ref(id).children.clone();
        for &p in &parents {
            self.unlink(p, id);
        }
        for &c in &children {
            self.unlink(id, c);
        }
        for &c in &children {
            for &p in &parents {
                let reachable = self.node_ref(c).parents.iter().any(|&q| {
                    q == p || covers_compiled(&self.node_ref(p).compiled, &self.node_ref(q).compiled)
                });
                if !reachable {
                    self.link(p, c);
                }
            }
            if self.node_ref(c).parents.is_empty() {
                self.roots.insert(c);
            }
        }
        self.roots.shift_remove(&id);
        let node = self.nodes[id.index()].take().expect("live node");
        for key in Self::posting_keys(&node.compiled) {
            if let Some(p) = self.postings.get_mut(&key) {
                p.remove(&id);
                if p.is_empty() {
                    self.postings.remove(&key);
                }
            }
        }
        self.by_key.remove(&node.key);
        self.node_bytes -= node_bytes(&node.sub, &node.key);
        self.live -= 1;
        self.free.push(id.0);
    }

    /// All (client, subscription) entries whose subscription matches `h`,
    /// sorted.
    pub fn match_header(&self, h: &PublicationHeader) -> Vec<(ClientId, SubId)> {
        let mut out = Vec::new();
        self.visit_matching(h, |n| out.extend(n.clients.keys().cloned()));
        out.sort();
        out
    }

    /// Distinct (client, reply address) pairs of the matching entries,
    /// sorted. Entries inserted without a reply address are skipped.
    pub fn match_routes(&self, h: &PublicationHeader) -> Vec<(ClientId, Arc<str>)> {
        let mut out = Vec::new();
        self.visit_matching(h, |n| {
            out.extend(n.clients.iter().filter_map(|((c, _), r)| Some((c.clone(), r.clone()?))))
        });
        out.sort();
        out.dedup();
        out
    }

    /// Number of matching nodes; cheaper than [`Self::match_header`] when only
    /// the count is wanted.
    pub fn count_matching_entries(&self, h: &PublicationHeader) -> usize {
        let mut count = 0;
        self.visit_matching(h, |n| count += n.clients.len());
        count
    }

    fn visit_matching(&self, h: &PublicationHeader, mut f: impl FnMut(&Node)) {
        if self.live == 0 {
            return;
        }
        let table = self.lookup_table(h);
        let mut stack: Vec<NodeId> = Vec::new();
        // Bitmap over node slots; only children with several parents use it.
        let mut shared_seen = vec![0u64; self.nodes.len().div_ceil(64)];
        for &r in &self.roots {
            if self.node_ref(r).eval(&table) {
                stack.push(r);
            }
        }
        while let Some(id) = stack.pop() {
            let node = self.node_ref(id);
            f(node);
            for &c in &node.children {
                let child = self.node_ref(c);
                if child.parents.len() > 1 {
                    let (word, bit) = (c.index() / 64, 1u64 << (c.index() % 64));
                    if shared_seen[word] & bit != 0 {
                        continue;
                    }
                    shared_seen[word] |= bit;
                }
                if child.eval(&table) {
                    stack.push(c);
                }
            }
        }
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            node_count: self.live,
            root_count: self.roots.len(),
            max_depth: self.max_depth(),
            footprint_bytes: self.footprint_bytes(),
        }
    }

    /// Nodes on the longest root-to-leaf path.
    fn max_depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut pending = vec![0usize; self.nodes.len()];
        let mut queue: Vec<NodeId> = Vec::new();
        for id in self.node_ids() {
            pending[id.index()] = self.node_ref(id).parents.len();
            if pending[id.index()] == 0 {
                depth[id.index()] = 1;
                queue.push(id);
            }
        }
        let mut best = 0;
        while let Some(id) = queue.pop() {
            let d = depth[id.index()];
            best = best.max(d);
            for &c in &self.node_ref(id).children {
                let ci = c.index();
                depth[ci] = depth[ci].max(d + 1);
                pending[ci] -= 1;
                if pending[ci] == 0 {
                    queue.push(c);
                }
            }
        }
        best
    }

    /// Exhaustive structural check: edge symmetry, root set, covering edges,
    /// no transitive edges, and reachability equal to the covering order.
    /// Quadratic in node count or worse; meant for tests and verification runs.
    pub fn audit(&self) -> Vec<AuditViolation> {
        let mut out = Vec::new();
        let ids: Vec<NodeId> = self.node_ids().collect();
        for &id in &ids {
            let n = self.node_ref(id);
            if n.parents.is_empty() != self.roots.contains(&id) {
                out.push(AuditViolation::RootMismatch(id));
            }
            for &c in &n.children {
                if !self.node_ref(c).parents.contains(&id) {
                    out.push(AuditViolation::AsymmetricEdge(id, c));
                }
            }
            for &p in &n.parents {
                if !self.node_ref(p).children.contains(&id) {
                    out.push(AuditViolation::AsymmetricEdge(p, id));
                }
            }
        }
        for &p in &ids {
            for &c in &self.node_ref(p).children {
                let (ps, cs) = (&self.node_ref(p).sub, &self.node_ref(c).sub);
                if p == c || !covers(ps, cs) {
                    out.push(AuditViolation::EdgeNotCovering(p, c));
                    continue;
                }
                let between = ids.iter().any(|&m| {
                    m != p
                        && m != c
                        && covers(ps, &self.node_ref(m).sub)
                        && covers(&self.node_ref(m).sub, cs)
                });
                if between {
                    out.push(AuditViolation::TransitiveEdge(p, c));
                }
            }
        }
        for &a in &ids {
            let reach = self.reachable_from(a);
            for &b in &ids {
                if a == b {
                    continue;
                }
                let (sa, sb) = (&self.node_ref(a).sub, &self.node_ref(b).sub);
                if covers(sa, sb) {
                    if covers(sb, sa) {
                        if a < b {
                            out.push(AuditViolation::DuplicateNode(a, b));
                        }
                    } else if !reach.contains(&b) {
                        out.push(AuditViolation::MissingOrder(a, b));
                    }
                }
            }
        }
        out
    }

    fn reachable_from(&self, a: NodeId) -> HashSet<NodeId> {
        let mut seen = HashSet::new();
        let mut stack = vec![a];
        while let Some(n) = stack.pop() {
            for &c in &self.node_ref(n).children {
                if seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        seen
    }

    /// Test hook: delete one edge, leaving the index corrupt. An edge into a
    /// single-parent node is preferred, which cuts that node off from matching.
    #[doc(hidden)]
    pub fn debug_drop_edge(&mut self) -> Option<(NodeId, NodeId)> {
        let edges = self.edges();
        let (p, c) = edges
            .iter()
            .copied()
            .find(|&(_, c)| self.node_ref(c).parents.len() == 1)
            .or_else(|| edges.first().copied())?;
        self.unlink(p, c);
        Some((p, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{canonicalize, matches};

    fn sub(text: &str) -> Subscription {
        canonicalize(&Subscription::parse(text).unwrap()).unwrap()
    }

    fn cid(s: &str) -> ClientId {
        ClientId::new(s).unwrap()
    }

    fn sid(s: &str) -> SubId {
        SubId::new(s).unwrap()
    }

    fn hdr(text: &str) -> PublicationHeader {
        PublicationHeader::parse(text).unwrap()
    }

    #[test]
    fn insert_builds_covering_edge() {
        let mut ix = ContainmentIndex::new();
        let a = ix.insert(&sub("x>0"), cid("c1"), sid("s1")).unwrap();
        let b = ix.insert(&sub("x=1"), cid("c2"), sid("s2")).unwrap();
        assert_eq!(ix.edges(), vec![(a, b)]);
        assert!(covers(ix.node(a).unwrap().subscription(), ix.node(b).unwrap().subscription()));
        assert_eq!(ix.stats().root_count, 1);
        assert!(ix.audit().is_empty());
    }

    #[test]
    fn insert_reparents_existing_nodes_below_new_cover() {
        let mut ix = ContainmentIndex::new();
        let c = ix.insert(&sub("x=1"), cid("c"), sid("s1")).unwrap();
        let a = ix.insert(&sub("x>0"), cid("c"), sid("s2")).unwrap();
        let b = ix.insert(&sub("x>0&x<5"), cid("c"), sid("s3")).unwrap();
        let mut edges = ix.edges();
        edges.sort();
        let mut want = vec![(a, b), (b, c)];
        want.sort();
        assert_eq!(edges, want);
        assert_eq!(ix.roots().collect::<Vec<_>>(), vec![a]);
        assert!(ix.audit().is_empty());
    }

    #[test]
    fn equal_subscriptions_share_a_node() {
        let mut ix = ContainmentIndex::new();
        let a = ix.insert(&sub(r#"symbol="HAL"&price<50"#), cid("c1"), sid("s1")).unwrap();
        let b = ix.insert(&sub(r#"price<50&symbol="HAL""#), cid("c2"), sid("s2")).unwrap();
        assert_eq!(a, b);
        assert_eq!(ix.stats().node_count, 1);
        assert_eq!(ix.node(a).unwrap().clients().count(), 2);
    }

    #[test]
    fn incomparable_subscriptions_are_separate_roots() {
        let mut ix = ContainmentIndex::new();
        let x = sub("x=1");
        let y = sub("y=2");
        assert!(!covers(&x, &y) && !covers(&y, &x));
        ix.insert(&x, cid("c"), sid("s1")).unwrap();
        ix.insert(&y, cid("c"), sid("s2")).unwrap();
        assert_eq!(ix.stats().root_count, 2);
        assert_eq!(ix.edge_count(), 0);
    }

    #[test]
    fn duplicate_and_non_canonical_inserts_are_rejected() {
        let mut ix = ContainmentIndex::new();
        ix.insert(&sub("x=1"), cid("c"), sid("s1")).unwrap();
        assert_eq!(
            ix.insert(&sub("y=1"), cid("c"), sid("s1")),
            Err(IndexError::Duplicate(sid("s1")))
        );
        let raw = Subscription::parse("y=1&x=1").unwrap();
        assert_eq!(ix.insert(&raw, cid("c"), sid("s9")), Err(IndexError::NotCanonical));
    }

    #[test]
    fn remove_mid_chain_reconnects() {
        let mut ix = ContainmentIndex::new();
        let a = ix.insert(&sub("x>0"), cid("c"), sid("a")).unwrap();
        ix.insert(&sub("x>0&x<10"), cid("c"), sid("b")).unwrap();
        let c = ix.insert(&sub("x=1"), cid("c"), sid("c")).unwrap();
        assert!(ix.remove(&sid("b")));
        assert_eq!(ix.edges(), vec![(a, c)]);
        assert!(ix.audit().is_empty());
    }

    #[test]
    fn remove_keeps_shortcut_when_other_path_exists() {
        // Diamond: top covers l and r, both cover bottom.
        let mut ix = ContainmentIndex::new();
        ix.insert(&sub("x>0"), cid("c"), sid("top")).unwrap();
        ix.insert(&sub("x>0&y>0"), cid("c"), sid("l")).unwrap();
        ix.insert(&sub("x>0&z>0"), cid("c"), sid("r")).unwrap();
        ix.insert(&sub("x>0&y>0&z>0"), cid("c"), sid("bottom")).unwrap();
        assert!(ix.audit().is_empty());
        assert!(ix.remove(&sid("l")));
        assert!(ix.audit().is_empty());
        assert_eq!(ix.edge_count(), 2);
    }

    #[test]
    fn remove_shared_and_unknown() {
        let mut ix = ContainmentIndex::new();
        let n = ix.insert(&sub("x=1"), cid("c1"), sid("s1")).unwrap();
        ix.insert(&sub("x=1"), cid("c2"), sid("s2")).unwrap();
        assert!(ix.remove(&sid("s1")));
        assert_eq!(ix.node_count(), 1);
        assert_eq!(ix.node(n).unwrap().clients().count(), 1);
        let before = ix.stats();
        assert!(!ix.remove(&sid("nope")));
        assert_eq!(ix.stats(), before);
        assert!(ix.remove(&sid("s2")));
        assert!(ix.is_empty());
        assert_eq!(ix.stats(), IndexStats::default());
    }

    #[test]
    fn match_examples() {
        let mut ix = ContainmentIndex::new();
        assert!(ix.match_header(&hdr("x=1")).is_empty());
        ix.insert(&sub("x>0"), cid("c1"), sid("s1")).unwrap();
        ix.insert(&sub("x=1"), cid("c2"), sid("s2")).unwrap();
        assert_eq!(
            ix.match_header(&hdr("x=1")),
            vec![(cid("c1"), sid("s1")), (cid("c2"), sid("s2"))]
        );
        assert_eq!(ix.match_header(&hdr("x=2")), vec![(cid("c1"), sid("s1"))]);
        assert!(ix.match_header(&hdr("x=-1")).is_empty());
        assert!(ix.match_header(&hdr("y=1")).is_empty());
    }

    #[test]
    fn match_text_not_seen_in_any_subscription() {
        let mut ix = ContainmentIndex::new();
        ix.insert(&sub(r#"s="HAL""#), cid("c1"), sid("s1")).unwrap();
        assert!(ix.match_header(&hdr(r#"s="IBM""#)).is_empty());
        assert_eq!(ix.match_header(&hdr(r#"s="HAL""#)).len(), 1);
    }

    #[test]
    fn diamond_child_reported_once() {
        let mut ix = ContainmentIndex::new();
        ix.insert(&sub("x>0"), cid("c"), sid("top")).unwrap();
        ix.insert(&sub("x>0&y>0"), cid("c"), sid("l")).unwrap();
        ix.insert(&sub("x>0&z>0"), cid("c"), sid("r")).unwrap();
        ix.insert(&sub("x>0&y>0&z>0"), cid("c"), sid("bottom")).unwrap();
        let got = ix.match_header(&hdr("x=1&y=1&z=1"));
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn stats_examples() {
        let mut ix = ContainmentIndex::new();
        assert_eq!(ix.stats(), IndexStats::default());
        let texts = ["x>0", "x>0&x<10", "x=1"];
        for (i, t) in texts.iter().enumerate() {
            ix.insert(&sub(t), cid("c"), sid(&format!("s{i}"))).unwrap();
        }
        let st = ix.stats();
        assert_eq!(st.max_depth, 3);
        assert_eq!(st.root_count, 1);
        assert_eq!(st.node_count, 3);
        let nodes: usize = ix
            .node_ids()
            .map(|n| {
                let v = ix.node(n).unwrap();
                node_bytes(v.subscription(), v.canonical_text())
            })
            .sum();
        let entries = 3 * entry_bytes(&cid("c"), &sid("s0"), &None);
        assert_eq!(st.footprint_bytes, nodes + entries + 2 * EDGE_BYTES);
        assert_eq!(node_bytes(&sub("x=1"), "x=1"), NODE_FIXED_BYTES + 6 + CONSTRAINT_FIXED_BYTES + 1);

    }

    #[test]
    fn corrupted_index_fails_audit() {
        let mut ix = ContainmentIndex::new();
        ix.insert(&sub("x>0"), cid("c"), sid("a")).unwrap();
        ix.insert(&sub("x=1"), cid("c"), sid("b")).unwrap();
        assert!(ix.audit().is_empty());
        ix.debug_drop_edge().unwrap();
        assert!(!ix.audit().is_empty());
    }

    #[test]
    fn matches_agrees_with_scan_on_small_case() {
        let mut ix = ContainmentIndex::new();
        let subs = ["a>1", "a>1&b<3", "a>2", r#"t="x"&a>0"#, "b=*", "a>=1&a<=1"];
        for (i, t) in subs.iter().enumerate() {
            ix.insert(&sub(t), cid("c"), sid(&format!("s{i}"))).unwrap();
        }
        assert!(ix.audit().is_empty());
        for h in ["a=1", "a=1.5&b=2", "a=3&b=4", r#"a=3&t="x""#, "b=0", r#"b="q""#] {
            let h = hdr(h);
            let mut want: Vec<_> = ix
                .entries()
                .filter(|(s, _, _)| matches(&h, s))
                .map(|(_, c, s)| (c.clone(), s.clone()))
                .collect();
            want.sort();
            assert_eq!(ix.match_header(&h), want);
        }
    }
}
