#include <cstdio>

int main() {
    std::puts("fperase: CLI under construction");
    return 0;
}
