/// Character trie over normal pieces, used for common-prefix lookup.
#[derive(Debug, Clone, Default)]
pub(crate) struct Trie {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: Vec<(char, u32)>,
    piece: Option<u32>,
}

impl Trie {
    pub(crate) fn new() -> Self {
        Trie {
            nodes: vec![Node::default()],
        }
    }

    pub(crate) fn insert(&mut self, key: &str, id: u32) {
        let mut at = 0usize;
        for c in key.chars() {
            at = match self.nodes[at].children.binary_search_by_key(&c, |&(k, _)| k) {
                Ok(pos) => self.nodes[at].children[pos].1 as usize,
                Err(pos) => {
                    let next = self.nodes.len();
                    self.nodes.push(Node::default());
                    self.nodes[at].children.insert(pos, (c, next as u32));
                    next
                }
            };
        }
        self.nodes[at].piece = Some(id);
    }

    /// Call `f(len_in_chars, id)` for every piece that is a prefix of `chars`.
    pub(crate) fn for_each_prefix(&self, chars: &[char], mut f: impl FnMut(usize, u32)) {
        let mut at = 0usize;
        for (i, c) in chars.iter().enumerate() {
            match self.nodes[at].children.binary_search_by_key(c, |&(k, _)| k) {
                Ok(pos) => at = self.nodes[at].children[pos].1 as usize,
                Err(_) => return,
            }
            if let Some(id) = self.nodes[at].piece {
                f(i + 1, id);
            }
        }
    }
}
