//! Experience storage shared by the dynamics models and the policy learner.

use rand::Rng;

/// One environment (or simulated) step `(s, a, r, s', terminal)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub state: Vec<S>,
    pub action: Vec<S>,
    pub reward: S,
    pub next_state: Vec<S>,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with uniform sampling over its contents.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<S> {
    items: Vec<Transition<S>>,
    capacity: usize,
    next: usize,
    inserted: u64,
}

impl<S: Clone> ReplayBuffer<S> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            items: Vec::new(),
            capacity,
            next: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition<S>) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of pushes since creation (or the last clear).
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.next = 0;
        self.inserted = 0;
    }

    pub fn get(&self, i: usize) -> &Transition<S> {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<S>> {
        self.items.iter()
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, rng: &mut R) -> Option<&'a Transition<S>> {
        if self.items.is_empty() {
            None
        } else {
            Some(&self.items[rng.gen_range(0..self.items.len())])
        }
    }
}
