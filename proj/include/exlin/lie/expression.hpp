#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "exlin/lie/lie.hpp"

namespace exlin::lie {

class ExpressionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Arithmetic over y1…yn built from the graph primitives:
///   expr   := term (('+'|'-') term)*
///   term   := unary (('*'|'/') unary)*        division by constants only
///   unary  := '-' unary | power
///   power  := atom ('^' integer)?
///   atom   := number | yK | func '(' expr ')' | '(' expr ')'
///   func   := exp log sinh cosh asinh softplus relu square
class Expression {
 public:
  static Expression parse(const std::string& text, std::size_t n) {
    Parser p{text, 0, n};
    Expression e;
    e.root_ = p.expr();
    p.skip();
    if (p.pos != text.size()) p.fail("unexpected '" + std::string(1, text[p.pos]) + "'");
    return e;
  }

  /// Builds the expression as a 1 x 1 node from the 1 x n row `y`.
  Var build(Graph& g, Var y) const { return build(*root_, g, y); }

  /// Folded value when the expression does not depend on y.
  std::optional<double> constant() const { return root_->op == Op::number ? std::optional(root_->value) : std::nullopt; }

 private:
  enum class Op { number, variable, add, sub, mul, div, neg, pow, call };
  struct Node {
    Op op = Op::number;
    double value = 0.0;
    int index = 0;
    std::string func;
    std::shared_ptr<Node> a, b;
  };
  using NodePtr = std::shared_ptr<Node>;

  static NodePtr number(double v) {
    auto n = std::make_shared<Node>();
    n->value = v;
    return n;
  }
  static bool is_number(const NodePtr& n) { return n->op == Op::number; }

  static double apply(const std::string& f, double x) {
    if (f == "exp") return std::exp(x);
    if (f == "log") return std::log(x);
    if (f == "sinh") return std::sinh(x);
    if (f == "cosh") return std::cosh(x);
    if (f == "asinh") return std::asinh(x);
    if (f == "softplus") return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    if (f == "relu") return x > 0 ? x : 0.0;
    return x * x;  // square
  }

  struct Parser {
    const std::string& s;
    std::size_t pos;
    std::size_t n;

    [[noreturn]] void fail(const std::string& msg) const {
      throw ExpressionError(msg + " at column " + std::to_string(pos + 1) + " in '" + s + "'");
    }
    void skip() {
      while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }
    bool eat(char c) {
      skip();
      if (pos < s.size() && s[pos] == c) {
        ++pos;
        return true;
      }
      return false;
    }
    NodePtr binary(Op op, NodePtr a, NodePtr b) {
      if (is_number(a) && is_number(b)) {
        switch (op) {
          case Op::add: return number(a->value + b->value);
          case Op::sub: return number(a->value - b->value);
          case Op::mul: return number(a->value * b->value);
          case Op::div: return number(a->value / b->value);
          default: break;
        }
      }
      auto node = std::make_shared<Node>();
      node->op = op;
      node->a = std::move(a);
      node->b = std::move(b);
      return node;
    }
    NodePtr expr() {
      NodePtr lhs = term();
      while (true) {
        if (eat('+')) lhs = binary(Op::add, lhs, term());
        else if (eat('-')) lhs = binary(Op::sub, lhs, term());
        else return lhs;
      }
    }
    NodePtr term() {
      NodePtr lhs = unary();
      while (true) {
        if (eat('*')) {
          lhs = binary(Op::mul, lhs, unary());
        } else if (eat('/')) {
          NodePtr rhs = unary();
          if (!is_number(rhs)) fail("division is only supported by constants");
          if (rhs->value == 0.0) fail("division by zero");
          lhs = binary(Op::div, lhs, rhs);
        } else {
          return lhs;
        }
      }
    }
    NodePtr unary() {
      if (eat('-')) {
        NodePtr a = unary();
        if (is_number(a)) return number(-a->value);
        auto node = std::make_shared<Node>();
        node->op = Op::neg;
        node->a = std::move(a);
        return node;
      }
      if (eat('+')) return unary();
      return power();
    }
    NodePtr power() {
      NodePtr base = atom();
      if (!eat('^')) return base;
      skip();
      const std::size_t start = pos;
      while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
      if (start == pos) fail("exponent must be a non-negative integer");
      const int k = std::stoi(s.substr(start, pos - start));
      if (k > 64) fail("exponent too large");
      if (is_number(base)) return number(std::pow(base->value, k));
      auto node = std::make_shared<Node>();
      node->op = Op::pow;
      node->index = k;
      node->a = std::move(base);
      return node;
    }
    NodePtr atom() {
      skip();
      if (pos >= s.size()) fail("unexpected end of expression");
      if (eat('(')) {
        NodePtr e = expr();
        if (!eat(')')) fail("expected ')'");
        return e;
      }
      const char c = s[pos];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        std::size_t used = 0;
        double v = 0.0;
        try {
          v = std::stod(s.substr(pos), &used);
        } catch (const std::exception&) {
          fail("bad number");
        }
        pos += used;
        return number(v);
      }
      if (std::isalpha(static_cast<unsigned char>(c))) {
        const std::size_t start = pos;
        while (pos < s.size() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_')) ++pos;
        const std::string word = s.substr(start, pos - start);
        if (word.size() > 1 && word[0] == 'y' && std::all_of(word.begin() + 1, word.end(), ::isdigit)) {
          const int k = std::stoi(word.substr(1));
          if (k < 1 || static_cast<std::size_t>(k) > n) {
            pos = start;
            fail("variable " + word + " out of range y1..y" + std::to_string(n));
          }
          auto node = std::make_shared<Node>();
          node->op = Op::variable;
          node->index = k - 1;
          return node;
        }
        static const char* funcs[] = {"exp", "log", "sinh", "cosh", "asinh", "softplus", "relu", "square"};
        if (std::find(std::begin(funcs), std::end(funcs), word) == std::end(funcs)) {
          pos = start;
          fail("unknown name '" + word + "'");
        }
        if (!eat('(')) fail("expected '(' after " + word);
        NodePtr arg = expr();
        if (!eat(')')) fail("expected ')'");
        if (is_number(arg)) return number(apply(word, arg->value));
        auto node = std::make_shared<Node>();
        node->op = Op::call;
        node->func = word;
        node->a = std::move(arg);
        return node;
      }
      fail("unexpected '" + std::string(1, c) + "'");
    }
  };

  static Var build(const Node& e, Graph& g, Var y) {
    switch (e.op) {
      case Op::number: return g.constant(e.value);
      case Op::variable: return g.slice(y, e.index, 1);
      case Op::add: return g.add(build(*e.a, g, y), build(*e.b, g, y));
      case Op::sub: return g.sub(build(*e.a, g, y), build(*e.b, g, y));
      case Op::mul: return g.mul(build(*e.a, g, y), build(*e.b, g, y));
      case Op::div: return g.scale(build(*e.a, g, y), 1.0 / e.b->value);
      case Op::neg: return g.neg(build(*e.a, g, y));
      case Op::pow: {
        if (e.index == 0) return g.constant(1.0);
        const Var base = build(*e.a, g, y);
        Var out = base;
        for (int k = 1; k < e.index; ++k) out = g.mul(out, base);
        return out;
      }
      case Op::call: {
        const Var a = build(*e.a, g, y);
        if (e.func == "exp") return g.exp(a);
        if (e.func == "log") return g.log(a);
        if (e.func == "sinh") return g.sinh(a);
        if (e.func == "cosh") return g.cosh(a);
        if (e.func == "asinh") return g.asinh(a);
        if (e.func == "softplus") return g.softplus(a);
        if (e.func == "relu") return g.relu(a);
        return g.square(a);
      }
    }
    throw ExpressionError("corrupt expression");
  }

  NodePtr root_;
};

/// Reads a system from text lines `n = 3`, `f1 = …`, …, `g3 = …`;
/// '#' starts a comment. Every component of f and g must be given once.
inline VectorFieldPair parse_system(const std::string& text, const std::string& name = "expression") {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  std::map<std::string, std::string> defs;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ExpressionError("line " + std::to_string(lineno) + ": expected 'name = expr'");
    std::string key = line.substr(0, eq);
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t") + 1);
    const std::string rhs = line.substr(eq + 1);
    if (key == "n") {
      try {
        const long v = std::stol(rhs);
        if (v < 1 || v > 64) throw std::out_of_range("n");
        n = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw ExpressionError("line " + std::to_string(lineno) + ": n must be an integer in 1..64");
      }
      continue;
    }
    if (!defs.emplace(key, rhs).second) {
      throw ExpressionError("line " + std::to_string(lineno) + ": '" + key + "' defined twice");
    }
  }
  if (n == 0) throw ExpressionError("missing 'n = <dimension>' line");
  std::vector<Expression> f, g;
  for (char field : {'f', 'g'}) {
    for (std::size_t i = 1; i <= n; ++i) {
      const std::string key = std::string(1, field) + std::to_string(i);
      auto it = defs.find(key);
      if (it == defs.end()) throw ExpressionError("missing component '" + key + "'");
      (field == 'f' ? f : g).push_back(Expression::parse(it->second, n));
      defs.erase(it);
    }
  }
  if (!defs.empty()) throw ExpressionError("unknown key '" + defs.begin()->first + "'");
  auto field_of = [](std::vector<Expression> parts) {
    return [parts = std::move(parts)](Graph& gr, Var y) {
      std::vector<Var> comps;
      comps.reserve(parts.size());
      for (const auto& e : parts) comps.push_back(e.build(gr, y));
      return comps.size() == 1 ? comps.front() : gr.concat(comps);
    };
  };
  VectorFieldPair sys;
  sys.n = n;
  sys.name = name;
  sys.f = field_of(std::move(f));
  sys.g = field_of(std::move(g));
  return sys;
}

inline VectorFieldPair load_system(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ExpressionError("cannot open system file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_system(buf.str(), path);
}

}  // namespace exlin::lie
