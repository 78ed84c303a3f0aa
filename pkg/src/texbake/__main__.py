from texbake.cli import main

main()
