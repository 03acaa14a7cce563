#include "smagnet/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace smagnet {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value.assign(smagnet::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <class T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != smagnet::numel(shape)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return full({}, value, requires_grad);
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item(): tensor of shape " + shape_str(shape()) +
                                " is not a scalar");
  }
  return node_->value[0];
}

template <class T>
T BasicTensor<T>::at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
  const auto& s = node_->shape;
  return node_->value[((b * s[1] + c) * s[2] + h) * s[3] + w];
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(shape(), node_->value, false);
}

template <class T>
template <class U>
BasicTensor<U> BasicTensor<T>::cast() const {
  std::vector<U> out(node_->value.begin(), node_->value.end());
  return BasicTensor<U>::from(shape(), std::move(out), node_->requires_grad);
}

template <class T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  Node<T>* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  root->ensure_grad();
  root->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf()) continue;
    n->backward_fn(*n);
    // Interior gradients are scratch space.
    std::vector<T>().swap(n->grad);
  }
}

namespace detail {

template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                           std::vector<std::shared_ptr<Node<T>>> parents,
                           std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(node));
}

template BasicTensor<float> make_result(Shape, std::vector<float>, const char*,
                                        std::vector<std::shared_ptr<Node<float>>>,
                                        std::function<void(Node<float>&)>);
template BasicTensor<double> make_result(Shape, std::vector<double>, const char*,
                                         std::vector<std::shared_ptr<Node<double>>>,
                                         std::function<void(Node<double>&)>);

}  // namespace detail

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<double> BasicTensor<float>::cast<double>() const;
template BasicTensor<float> BasicTensor<double>::cast<float>() const;
template BasicTensor<float> BasicTensor<float>::cast<float>() const;
template BasicTensor<double> BasicTensor<double>::cast<double>() const;
template void backward(const BasicTensor<float>&);
template void backward(const BasicTensor<double>&);

}  // namespace smagnet
