#include <fstream>
#include <iostream>
#include <string>
#include <vector>
#include "design.cc"  // written by yosys write_cxxrtl in the working directory

template <size_t N> void set_hex(cxxrtl::value<N> &v, const std::string &h) {
  for (size_t i = 0; i < v.chunks; i++) v.data[i] = 0;
  size_t bit = 0;
  for (int k = (int)h.size() - 1; k >= 0 && bit < N; k--, bit += 4) {
    uint32_t d = std::stoul(std::string(1, h[k]), nullptr, 16);
    for (int b = 0; b < 4 && bit + b < N; b++)
      if ((d >> b) & 1) v.data[(bit + b) / 32] |= 1u << ((bit + b) % 32);
  }
}
template <size_t N> std::string get_hex(const cxxrtl::value<N> &v) {
  size_t digits = (N + 3) / 4;
  std::string s;
  for (int d = digits - 1; d >= 0; d--) {
    uint32_t nib = 0;
    for (int b = 0; b < 4; b++) {
      size_t bit = d * 4 + b;
      if (bit < N && ((v.data[bit / 32] >> (bit % 32)) & 1)) nib |= 1 << b;
    }
    s += "0123456789abcdef"[nib];
  }
  return s;
}
std::vector<std::string> lines(const char *p) {
  std::ifstream f(p); std::vector<std::string> v; std::string l;
  while (std::getline(f, l)) if (!l.empty()) v.push_back(l);
  return v;
}
int main(int argc, char **argv) {
  int ratio = atoi(argv[1]), slow = atoi(argv[2]);
  auto stim = lines("stimulus.hex"), exp = lines("expected.hex");
  cxxrtl_design::p_dut__top top;
  top.p_reset.set<bool>(true);
  for (int i = 0; i < 2; i++) { top.p_clock.set<bool>(false); top.step(); top.p_clock.set<bool>(true); top.step(); }
  top.p_reset.set<bool>(false);
  size_t fed = 0, got = 0, errors = 0;
  long limit = (long)(stim.size() / slow + 2) * ratio * slow + 200;
  for (long cycle = 0; cycle < limit && got < exp.size(); cycle++) {
    bool dv = fed < stim.size() && (size_t)cycle == (fed / slow) * ratio * slow + fed % slow;
    top.p_data__valid__in.set<bool>(dv);
    if (dv) set_hex(top.p_u, stim[fed++]);
    top.p_clock.set<bool>(false); top.step();
    if (top.p_data__valid__out.get<bool>()) {
      std::string y = get_hex(top.p_y);
      if (y != exp[got]) { if (errors < 5) std::cout << "sample " << got << " cycle " << cycle << ": expected " << exp[got] << " got " << y << "\n"; errors++; }
      got++;
    }
    top.p_clock.set<bool>(true); top.step();
  }
  std::cout << (errors == 0 && got == exp.size() ? "PASS " : "FAIL ") << got << "/" << exp.size() << " errors " << errors << "\n";
  return errors != 0 || got != exp.size();
}
