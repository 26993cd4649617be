use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::TransportError;

/// A concrete topic a message is published to. No wildcards.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicName(String);

/// A subscription pattern. `+` matches one level, a trailing `#` matches
/// the parent level and everything below it.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicFilter(String);

fn check_levels(s: &str) -> Result<(), TransportError> {
    if s.is_empty() {
        return Err(TransportError::InvalidTopic("topic is empty".into()));
    }
    if s.split('/').any(str::is_empty) {
        return Err(TransportError::InvalidTopic(format!("{s:?} has an empty level")));
    }
    Ok(())
}

impl TopicName {
    pub fn new(s: impl Into<String>) -> Result<Self, TransportError> {
        let s = s.into();
        check_levels(&s)?;
        if s.contains(['+', '#']) {
            return Err(TransportError::InvalidTopic(format!(
                "{s:?}: wildcards are only valid in subscriptions"
            )));
        }
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    /// Last level, e.g. the sender segment of a fragment topic.
    pub fn last_level(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or_default()
    }
}

impl TopicFilter {
    pub fn new(s: impl Into<String>) -> Result<Self, TransportError> {
        let s = s.into();
        check_levels(&s)?;
        let levels: Vec<&str> = s.split('/').collect();
        for (i, level) in levels.iter().enumerate() {
            let wild = level.contains(['+', '#']);
            if wild && level.len() != 1 {
                return Err(TransportError::InvalidTopic(format!(
                    "{s:?}: wildcard must occupy a whole level"
                )));
            }
            if *level == "#" && i + 1 != levels.len() {
                return Err(TransportError::InvalidTopic(format!(
                    "{s:?}: '#' must be the last level"
                )));
            }
        }
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        matches(self.as_str(), topic.as_str())
    }
}

impl From<TopicName> for TopicFilter {
    fn from(t: TopicName) -> Self {
        Self(t.0)
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Level-by-level MQTT match of `topic` against `filter`. Neither is
/// validated here.
pub fn matches(filter: &str, topic: &str) -> bool {
    let mut topics = topic.split('/');
    for f in filter.split('/') {
        if f == "#" {
            return true;
        }
        match topics.next() {
            Some(_) if f == "+" => continue,
            Some(t) if t == f => continue,
            _ => return false,
        }
    }
    topics.next().is_none()
}

#[derive(Debug)]
struct TrieNode<T> {
    children: BTreeMap<String, TrieNode<T>>,
    plus: Option<Box<TrieNode<T>>>,
    /// Subscribers whose filter ends here.
    exact: BTreeSet<T>,
    /// Subscribers whose filter is `<path to here>/#`.
    rest: BTreeSet<T>,
}

impl<T> Default for TrieNode<T> {
    fn default() -> Self {
        Self {
            children: BTreeMap::new(),
            plus: None,
            exact: BTreeSet::new(),
            rest: BTreeSet::new(),
        }
    }
}

impl<T: Ord + Clone> TrieNode<T> {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.plus.is_none() && self.exact.is_empty() && self.rest.is_empty()
    }

    fn collect(&self, levels: &[&str], out: &mut BTreeSet<T>) {
        out.extend(self.rest.iter().cloned());
        let Some((head, tail)) = levels.split_first() else {
            out.extend(self.exact.iter().cloned());
            return;
        };
        if let Some(child) = self.children.get(*head) {
            child.collect(tail, out);
        }
        if let Some(plus) = &self.plus {
            plus.collect(tail, out);
        }
    }

    fn remove(&mut self, levels: &[&str], value: &T) -> bool {
        match levels.split_first() {
            None => self.exact.remove(value),
            Some((&"#", [])) => self.rest.remove(value),
            Some((&"+", tail)) => {
                let Some(plus) = self.plus.as_mut() else {
                    return false;
                };
                let removed = plus.remove(tail, value);
                if plus.is_empty() {
                    self.plus = None;
                }
                removed
            }
            Some((head, tail)) => {
                let Some(child) = self.children.get_mut(*head) else {
                    return false;
                };
                let removed = child.remove(tail, value);
                if child.is_empty() {
                    self.children.remove(*head);
                }
                removed
            }
        }
    }
}

/// Subscription index keyed by filter levels.
#[derive(Debug)]
pub struct SubscriptionTrie<T> {
    root: TrieNode<T>,
}

impl<T> Default for SubscriptionTrie<T> {
    fn default() -> Self {
        Self {
            root: TrieNode::default(),
        }
    }
}

impl<T: Ord + Clone> SubscriptionTrie<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if `value` was already subscribed with this filter.
    pub fn insert(&mut self, filter: &TopicFilter, value: T) -> bool {
        let mut node = &mut self.root;
        let levels: Vec<&str> = filter.as_str().split('/').collect();
        for (i, level) in levels.iter().enumerate() {
            match *level {
                "#" => {
                    debug_assert_eq!(i + 1, levels.len());
                    return node.rest.insert(value);
                }
                "+" => node = node.plus.get_or_insert_with(Default::default),
                lit => node = node.children.entry(lit.to_string()).or_default(),
            }
        }
        node.exact.insert(value)
    }

    pub fn remove(&mut self, filter: &TopicFilter, value: &T) -> bool {
        let levels: Vec<&str> = filter.as_str().split('/').collect();
        self.root.remove(&levels, value)
    }

    /// Every value with at least one filter matching `topic`, deduplicated.
    pub fn matches(&self, topic: &TopicName) -> BTreeSet<T> {
        let levels: Vec<&str> = topic.levels().collect();
        let mut out = BTreeSet::new();
        self.root.collect(&levels, &mut out);
        out
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_empty()
    }
}

/// Topic layout for the transfer protocol. Receivers own the `send_header`,
/// `hash_sender_orq` and `type_request` namespaces; senders own their
/// `hash_sender` topic.
pub mod scheme {
    use super::{TopicFilter, TopicName};
    use crate::codec::SenderId;

    fn name(s: String) -> TopicName {
        TopicName::new(s).expect("sender ids are valid topic levels")
    }

    fn filter(s: String) -> TopicFilter {
        TopicFilter::new(s).expect("sender ids are valid topic levels")
    }

    pub fn send_header(receiver: &SenderId) -> TopicName {
        name(format!("net/{receiver}/send_header"))
    }

    pub fn hash_sender(sender: &SenderId) -> TopicName {
        name(format!("net/{sender}/hash_sender"))
    }

    pub fn hash_sender_orq(receiver: &SenderId, sender: &SenderId) -> TopicName {
        name(format!("net/{receiver}/hash_sender_orq/{sender}"))
    }

    pub fn hash_sender_orq_all(receiver: &SenderId) -> TopicFilter {
        filter(format!("net/{receiver}/hash_sender_orq/+"))
    }

    pub fn type_request(receiver: &SenderId) -> TopicName {
        name(format!("net/{receiver}/type_request"))
    }

    /// What a topic means to the node that receives it.
    #[derive(Debug, Clone, PartialEq, Eq)]
    pub enum TopicKind {
        SendHeader,
        HashSender,
        Fragments { sender: SenderId },
        TypeRequest,
    }

    /// Classifies a topic in `owner`'s namespace; `None` for anything else.
    pub fn classify(owner: &SenderId, topic: &TopicName) -> Option<TopicKind> {
        let mut levels = topic.levels();
        if levels.next()? != "net" || levels.next()? != owner.as_str() {
            return None;
        }
        let kind = match levels.next()? {
            "send_header" => TopicKind::SendHeader,
            "hash_sender" => TopicKind::HashSender,
            "type_request" => TopicKind::TypeRequest,
            "hash_sender_orq" => TopicKind::Fragments {
                sender: SenderId::new(levels.next()?).ok()?,
            },
            _ => return None,
        };
        levels.next().is_none().then_some(kind)
    }
}
