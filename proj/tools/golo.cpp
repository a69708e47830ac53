#include <cstdio>

int main() {
    std::puts("golo: CLI under construction");
    return 0;
}
