#include <cstdio>

int main() {
    struct Case { int a; int b; int c; int want; };
    const Case cases[] = {{1, 2, 3, 3}, {3, 2, 1, 3}, {1, 5, 2, 5}, {2, 7, 4, 7}};
    for (const Case &t : cases) {
        if (max_of_three(t.a, t.b, t.c) != t.want) {
            std::printf("max_of_three(%d, %d, %d) != %d\n", t.a, t.b, t.c, t.want);
            return 1;
        }
    }
    return 0;
}
